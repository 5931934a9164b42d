"""ResNet-101 spatial and global features with ImageNet preprocessing.

Pixels are scaled to [0, 1] and normalized with the ImageNet channel
statistics (mean 0.485/0.456/0.406, std 0.229/0.224/0.225). Spatial
features come from the last convolutional block, pooled onto a G x G
grid and flattened to k = G*G rows of 2048 channels; the global feature
is the post-pooling, pre-classifier 2048-vector.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models

from rcfextract.rcf1 import Rcf1Writer, Record

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
FEATURE_DIM = 2048

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".webp")


def preprocess(image: Image.Image, size: int) -> torch.Tensor:
    """Resize to size x size, scale to [0,1], normalize per channel."""
    image = image.convert("RGB").resize((size, size), Image.BILINEAR)
    array = np.asarray(image, dtype=np.float32) / 255.0
    array = (array - np.array(IMAGENET_MEAN, dtype=np.float32)) \
        / np.array(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(array.transpose(2, 0, 1)).unsqueeze(0)


class FeatureExtractor:
    """Frozen ResNet-101 truncated before its classifier head."""

    def __init__(self, grid: int = 7, size: int = 224, weights: str = "pretrained"):
        if grid < 1 or size < 32:
            raise ValueError("grid must be >= 1 and size >= 32")
        self.grid = grid
        self.size = size
        if weights == "pretrained":
            backbone = models.resnet101(weights=models.ResNet101_Weights.IMAGENET1K_V1)
        elif weights == "none":
            backbone = models.resnet101(weights=None)
        else:
            raise ValueError(f"weights must be 'pretrained' or 'none', got {weights!r}")
        # everything up to (and excluding) avgpool/fc
        self.trunk = torch.nn.Sequential(*list(backbone.children())[:-2])
        self.trunk.eval()
        for p in self.trunk.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def features(self, image: Image.Image) -> tuple[np.ndarray, np.ndarray]:
        """(k x 2048 spatial rows, 2048 global vector) for one image."""
        batch = preprocess(image, self.size)
        fmap = self.trunk(batch)                      # 1 x 2048 x H x W
        global_feat = fmap.mean(dim=(2, 3))[0]        # post-pooling, pre-fc
        grid = torch.nn.functional.adaptive_avg_pool2d(fmap, self.grid)
        spatial = grid[0].reshape(FEATURE_DIM, -1).T.contiguous()
        return spatial.numpy().astype(np.float32), \
            global_feat.numpy().astype(np.float32)


def iter_image_paths(images_dir) -> list[Path]:
    root = Path(images_dir)
    if not root.is_dir():
        raise NotADirectoryError(f"not a directory: {images_dir}")
    return sorted(p for p in root.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES)


def extract_directory(images_dir, out_path, grid: int = 7, size: int = 224,
                      weights: str = "pretrained", log_fn=None) -> dict:
    """Extract every readable image under images_dir into one RCF1 file.

    Unreadable files are skipped with a warning and listed in a sidecar
    log next to the output (`<out>.skipped.log`). Returns a summary dict.
    """
    extractor = FeatureExtractor(grid=grid, size=size, weights=weights)
    paths = iter_image_paths(images_dir)
    if not paths:
        raise FileNotFoundError(f"no images with {IMAGE_SUFFIXES} under {images_dir}")
    skipped: list[str] = []
    with Rcf1Writer(out_path, FEATURE_DIM, FEATURE_DIM) as writer:
        for path in paths:
            try:
                with Image.open(path) as image:
                    spatial, global_feat = extractor.features(image)
            except (OSError, ValueError) as exc:
                warnings.warn(f"skipping unreadable image {path.name}: {exc}",
                              stacklevel=2)
                skipped.append(f"{path.name}\t{exc}")
                continue
            writer.add(Record(path.stem, spatial, global_feat))
            if log_fn is not None:
                log_fn({"event": "extracted", "image_id": path.stem,
                        "k": grid * grid})
    sidecar = Path(str(out_path) + ".skipped.log")
    if skipped:
        sidecar.write_text("\n".join(skipped) + "\n")
    elif sidecar.exists():
        sidecar.unlink()
    return {"images": writer.count, "skipped": len(skipped),
            "k": grid * grid, "feature_dim": FEATURE_DIM}
