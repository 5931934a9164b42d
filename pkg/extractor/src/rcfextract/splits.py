"""Karpathy split JSON to caption-manifest conversion.

Input: ``{"images": [{"filename": ..., "split": ..., "sentences":
[{"raw": ...}, ...]}, ...]}``. Output: a JSON array of ``{"id", "split",
"captions"}`` with ids taken from filename stems, the "restval" split
folded into train, and splits guaranteed disjoint.
"""

from __future__ import annotations

import json
from pathlib import Path


class SplitFormatError(ValueError):
    """Source JSON does not look like a Karpathy split file."""


def convert_karpathy(source_path) -> tuple[list[dict], dict[str, int]]:
    """Parse a Karpathy split file into manifest entries and split counts."""
    try:
        obj = json.loads(Path(source_path).read_text())
    except json.JSONDecodeError as exc:
        raise SplitFormatError(f"{source_path}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict) or "images" not in obj:
        raise SplitFormatError(f"{source_path}: missing top-level 'images' list")
    entries: list[dict] = []
    counts = {"train": 0, "val": 0, "test": 0}
    seen: set[str] = set()
    for item in obj["images"]:
        try:
            image_id = Path(item["filename"]).stem
            split = item["split"]
            captions = [s["raw"] for s in item["sentences"]]
        except (KeyError, TypeError) as exc:
            raise SplitFormatError(f"malformed image entry: {item!r}") from exc
        if split == "restval":
            split = "train"
        if split not in counts:
            raise SplitFormatError(f"unknown split {split!r} for {image_id!r}")
        if not captions:
            raise SplitFormatError(f"image {image_id!r} has no captions")
        if image_id in seen:
            raise SplitFormatError(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        counts[split] += 1
        entries.append({"id": image_id, "split": split, "captions": captions})
    if not entries:
        raise SplitFormatError(f"{source_path}: no images")
    return entries, counts


def write_manifest(entries: list[dict], out_path) -> None:
    Path(out_path).write_text(json.dumps(entries))
