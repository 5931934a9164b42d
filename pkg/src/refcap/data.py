"""Caption tokenization, vocabulary, and feature ingestion.

The feature interchange format (RCF1, little-endian throughout):

    magic "RCF1" | u32 version=1 | u32 record_count | u32 D | u32 D_g
    per record: u16 id_length | UTF-8 id | u32 k
                | k*D float32 (row-major, region-major) | D_g float32

Vocabulary files are JSON ``{"tokens": {token: id}, "min_count": int}``;
caption manifests are JSON arrays of
``{"id": str, "split": "train"|"val"|"test", "captions": [str, ...]}``.
"""

from __future__ import annotations

import json
import string
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, START, END, UNK = 0, 1, 2, 3
PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = {PAD_TOKEN: PAD, START_TOKEN: START, END_TOKEN: END, UNK_TOKEN: UNK}

RCF1_MAGIC = b"RCF1"
RCF1_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class FeatureFileError(DataError):
    """Problem with an RCF1 feature file."""


class BadMagicError(FeatureFileError):
    pass


class VersionError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class DuplicateIdError(FeatureFileError):
    pass


class MissingFeatureError(DataError):
    """A manifest image id has no feature record."""

    def __init__(self, image_id: str):
        super().__init__(f"no feature record for image id {image_id!r}")
        self.image_id = image_id


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(raw: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return raw.lower().translate(_PUNCT_TABLE).split()


@dataclass
class EncodedCaption:
    """Fixed-width id sequence: start + tokens + end, padded to max_len+2."""

    ids: list[int]
    true_length: int

    def validate(self, max_len: int) -> None:
        if len(self.ids) != max_len + 2:
            raise DataError(f"encoded width {len(self.ids)} != max_len+2")
        if not 2 <= self.true_length <= max_len + 2:
            raise DataError(f"true_length {self.true_length} out of range")
        if self.ids[0] != START or self.ids[self.true_length - 1] != END:
            raise DataError("caption must begin with <start> and end with <end>")
        if any(t != PAD for t in self.ids[self.true_length:]):
            raise DataError("positions past true_length must be <pad>")


class Vocabulary:
    """Bidirectional token<->id map with fixed reserved ids 0..3."""

    def __init__(self, token_to_id: dict[str, int], min_count: int = 1):
        for tok, want in RESERVED.items():
            if token_to_id.get(tok) != want:
                raise DataError(f"reserved token {tok!r} must map to id {want}")
        ids = sorted(token_to_id.values())
        if ids != list(range(len(token_to_id))):
            raise DataError("vocabulary ids must be contiguous from 0")
        self.token_to_id = dict(token_to_id)
        self.min_count = min_count
        self.id_to_token = [None] * len(token_to_id)
        for tok, i in token_to_id.items():
            self.id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    @classmethod
    def build(cls, manifest: "CaptionManifest", min_count: int = 5) -> "Vocabulary":
        """Count train-split tokens; keep those seen at least min_count times.

        Surviving tokens get ids after the reserved block, ordered by
        descending frequency then alphabetically, so rebuilds from the
        same manifest are identical.
        """
        if min_count < 1:
            raise DataError(f"min_count must be >= 1, got {min_count}")
        counts: dict[str, int] = {}
        seen_train = False
        for entry in manifest.entries:
            if entry.split != "train":
                continue
            seen_train = True
            for caption in entry.captions:
                for tok in tokenize(caption):
                    counts[tok] = counts.get(tok, 0) + 1
        if not seen_train:
            raise DataError("manifest has no train-split captions")
        kept = sorted((t for t, c in counts.items() if c >= min_count),
                      key=lambda t: (-counts[t], t))
        mapping = dict(RESERVED)
        for offset, tok in enumerate(kept):
            mapping[tok] = len(RESERVED) + offset
        return cls(mapping, min_count=min_count)

    def encode(self, raw: str, max_len: int) -> EncodedCaption:
        """Tokenize, truncate to max_len interior tokens, wrap and pad."""
        if max_len < 1:
            raise DataError(f"max_len must be >= 1, got {max_len}")
        tokens = tokenize(raw)
        if not tokens:
            raise DataError(f"caption has no tokens after cleaning: {raw!r}")
        tokens = tokens[:max_len]
        ids = [START] + [self.lookup(t) for t in tokens] + [END]
        true_length = len(ids)
        ids += [PAD] * (max_len + 2 - true_length)
        return EncodedCaption(ids=ids, true_length=true_length)

    def decode(self, ids) -> list[str]:
        """Tokens for the given ids, reserved ids stripped."""
        return [self.id_to_token[i] for i in ids
                if i not in (PAD, START, END)]

    def to_json(self) -> dict:
        return {"tokens": self.token_to_id, "min_count": self.min_count}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], min_count=obj.get("min_count", 1))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return f"{zlib.crc32(blob):08x}"


# ---------------------------------------------------------------------------
# feature records


@dataclass
class FeatureRecord:
    """Per-image spatial features (k x D) and a global feature (D_g)."""

    image_id: str
    spatial: np.ndarray
    global_feat: np.ndarray

    def __post_init__(self):
        self.spatial = np.asarray(self.spatial, dtype=np.float32)
        self.global_feat = np.asarray(self.global_feat, dtype=np.float32).reshape(-1)
        if self.spatial.ndim != 2 or self.spatial.shape[0] < 1:
            raise DataError(f"spatial features must be k x D with k >= 1, "
                            f"got shape {self.spatial.shape}")
        if not np.all(np.isfinite(self.spatial)) or not np.all(np.isfinite(self.global_feat)):
            raise DataError(f"non-finite feature values for {self.image_id!r}")

    @property
    def k(self) -> int:
        return self.spatial.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.spatial.shape[1]

    @property
    def global_dim(self) -> int:
        return self.global_feat.shape[0]


class FeatureStore:
    """Immutable id -> FeatureRecord map with store-wide dimensions."""

    def __init__(self, records: list[FeatureRecord]):
        if not records:
            raise DataError("feature store needs at least one record")
        self.feature_dim = records[0].feature_dim
        self.global_dim = records[0].global_dim
        self._by_id: dict[str, FeatureRecord] = {}
        for rec in records:
            if rec.feature_dim != self.feature_dim or rec.global_dim != self.global_dim:
                raise DataError(
                    f"record {rec.image_id!r} dims ({rec.feature_dim}, {rec.global_dim}) "
                    f"differ from store dims ({self.feature_dim}, {self.global_dim})")
            if rec.image_id in self._by_id:
                raise DuplicateIdError(f"duplicate image id {rec.image_id!r}")
            self._by_id[rec.image_id] = rec

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._by_id

    def __getitem__(self, image_id: str) -> FeatureRecord:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise MissingFeatureError(image_id) from None

    def ids(self) -> list[str]:
        return list(self._by_id)

    def records(self):
        return self._by_id.values()


def save_features(records, path) -> None:
    """Write records to an RCF1 file; round-trips bit-exactly."""
    records = list(records)
    store = FeatureStore(records)  # validates dims and duplicate ids
    with open(path, "wb") as fh:
        fh.write(RCF1_MAGIC)
        fh.write(struct.pack("<III I", RCF1_VERSION, len(records),
                             store.feature_dim, store.global_dim))
        for rec in records:
            id_bytes = rec.image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<I", rec.k))
            fh.write(rec.spatial.astype("<f4").tobytes(order="C"))
            fh.write(rec.global_feat.astype("<f4").tobytes())


def load_features(path) -> FeatureStore:
    """Read an RCF1 file, validating magic, version, and record extents."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != RCF1_MAGIC:
        raise BadMagicError(f"{path}: not an RCF1 file (magic {data[:4]!r})")
    if len(data) < 20:
        raise TruncatedFileError(f"{path}: header truncated")
    version, count, dim, global_dim = struct.unpack_from("<IIII", data, 4)
    if version != RCF1_VERSION:
        raise VersionError(f"{path}: unsupported RCF1 version {version}")
    offset = 20
    records: list[FeatureRecord] = []
    seen: set[str] = set()
    for _ in range(count):
        try:
            (id_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            image_id = data[offset:offset + id_len].decode("utf-8")
            if len(data) < offset + id_len:
                raise struct.error
            offset += id_len
            (k,) = struct.unpack_from("<I", data, offset)
            offset += 4
            spatial = np.frombuffer(data, dtype="<f4", count=k * dim, offset=offset)
            if spatial.size != k * dim:
                raise struct.error
            offset += 4 * k * dim
            global_feat = np.frombuffer(data, dtype="<f4", count=global_dim, offset=offset)
            if global_feat.size != global_dim:
                raise struct.error
            offset += 4 * global_dim
        except (struct.error, ValueError) as exc:
            raise TruncatedFileError(f"{path}: truncated record "
                                     f"(record {len(records)})") from exc
        if image_id in seen:
            raise DuplicateIdError(f"{path}: duplicate image id {image_id!r}")
        seen.add(image_id)
        records.append(FeatureRecord(image_id, spatial.reshape(k, dim).copy(),
                                     global_feat.copy()))
    return FeatureStore(records)


def synth_features(seed: int, image_id: str, k: int, dim: int,
                   global_dim: int) -> FeatureRecord:
    """Deterministic pseudo-random feature record for tests and fixtures."""
    if min(k, dim, global_dim) < 1:
        raise DataError("k, D and D_g must all be >= 1")
    entropy = [seed, zlib.crc32(image_id.encode("utf-8")), k, dim, global_dim]
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    return FeatureRecord(
        image_id,
        rng.standard_normal((k, dim)).astype(np.float32),
        rng.standard_normal(global_dim).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# caption manifest and prepared datasets

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    image_id: str
    split: str
    captions: list[str]


class CaptionManifest:
    """Image -> (split, raw captions) listing; splits are disjoint."""

    def __init__(self, entries: list[ManifestEntry]):
        seen: set[str] = set()
        for e in entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r} for {e.image_id!r}")
            if not e.captions:
                raise DataError(f"image {e.image_id!r} has no captions")
            if e.image_id in seen:
                raise DataError(f"image {e.image_id!r} appears in multiple entries")
            seen.add(e.image_id)
        self.entries = entries

    @classmethod
    def from_json(cls, obj) -> "CaptionManifest":
        if not isinstance(obj, list):
            raise DataError("manifest must be a JSON array")
        entries = []
        for item in obj:
            try:
                entries.append(ManifestEntry(item["id"], item["split"],
                                             list(item["captions"])))
            except (KeyError, TypeError) as exc:
                raise DataError(f"malformed manifest entry: {item!r}") from exc
        return cls(entries)

    @classmethod
    def load(cls, path) -> "CaptionManifest":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json(obj)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


@dataclass
class PreparedImage:
    image_id: str
    split: str
    encoded: list[EncodedCaption]
    ref_tokens: list[list[str]] = field(default_factory=list)


class PreparedDataset:
    """Encoded captions joined with their feature records, ready to train."""

    def __init__(self, vocab: Vocabulary, max_len: int,
                 images: list[PreparedImage], features: FeatureStore):
        self.vocab = vocab
        self.max_len = max_len
        self.images = images
        self.features = features

    def split_images(self, split: str) -> list[PreparedImage]:
        return [im for im in self.images if im.split == split]

    def split_pairs(self, split: str) -> list[tuple[str, EncodedCaption]]:
        """One (image_id, caption) pair per caption in the split."""
        return [(im.image_id, cap)
                for im in self.images if im.split == split
                for cap in im.encoded]

    def references(self, image_id: str) -> list[list[str]]:
        for im in self.images:
            if im.image_id == image_id:
                return im.ref_tokens
        raise KeyError(image_id)

    def validate(self) -> None:
        for im in self.images:
            for cap in im.encoded:
                cap.validate(self.max_len)


def prepare_dataset(manifest: CaptionManifest, features: FeatureStore,
                    min_count: int = 5, max_len: int = 50) -> PreparedDataset:
    """Build vocabulary from train captions and encode every caption.

    Every manifest id must have a feature record; the first missing one
    raises MissingFeatureError naming it. Captions that clean to zero
    tokens are rejected here, before any training starts.
    """
    vocab = Vocabulary.build(manifest, min_count=min_count)
    images = []
    for entry in manifest.entries:
        if entry.image_id not in features:
            raise MissingFeatureError(entry.image_id)
        encoded = [vocab.encode(raw, max_len) for raw in entry.captions]
        refs = [tokenize(raw) for raw in entry.captions]
        images.append(PreparedImage(entry.image_id, entry.split, encoded, refs))
    return PreparedDataset(vocab, max_len, images, features)


def write_prepared(dataset: PreparedDataset, out_dir, features_path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset.vocab.save(out / "vocab.json")
    captions = {
        "max_len": dataset.max_len,
        "images": [
            {
                "id": im.image_id,
                "split": im.split,
                "captions": [{"ids": c.ids, "true_length": c.true_length}
                             for c in im.encoded],
                "tokens": im.ref_tokens,
            }
            for im in dataset.images
        ],
    }
    (out / "captions.json").write_text(json.dumps(captions))
    splits = {s: [im.image_id for im in dataset.images if im.split == s]
              for s in SPLITS}
    (out / "splits.json").write_text(json.dumps(splits))
    meta = {
        "features_path": str(Path(features_path).resolve()),
        "min_count": dataset.vocab.min_count,
        "max_len": dataset.max_len,
        "vocab_size": len(dataset.vocab),
        "counts": {s: len(ids) for s, ids in splits.items()},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))


def load_prepared(data_dir, features_path=None) -> PreparedDataset:
    data = Path(data_dir)
    try:
        vocab = Vocabulary.load(data / "vocab.json")
        captions = json.loads((data / "captions.json").read_text())
        meta = json.loads((data / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"not a prepared dataset directory: {data_dir} "
                        f"(missing {exc.filename})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{data_dir}: corrupt prepared data: {exc}") from exc
    images = [
        PreparedImage(
            im["id"], im["split"],
            [EncodedCaption(c["ids"], c["true_length"]) for c in im["captions"]],
            [list(t) for t in im["tokens"]],
        )
        for im in captions["images"]
    ]
    features = load_features(features_path or meta["features_path"])
    return PreparedDataset(vocab, captions["max_len"], images, features)
