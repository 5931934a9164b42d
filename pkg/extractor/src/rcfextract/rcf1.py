"""Writer for the RCF1 feature interchange format.

Layout (little-endian): magic "RCF1", u32 version=1, u32 record_count,
u32 D, u32 D_g, then per record u16 id_length, UTF-8 id, u32 k,
k*D float32 row-major, D_g float32. This file is the contract between
the extractor and the captioning trainer; the trainer's reader is the
reference consumer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"RCF1"
VERSION = 1


@dataclass
class Record:
    image_id: str
    spatial: np.ndarray    # k x D float32
    global_feat: np.ndarray  # D_g float32


class Rcf1Writer:
    """Streams records to disk; header is patched with the final count."""

    def __init__(self, path, feature_dim: int, global_dim: int):
        self.path = path
        self.feature_dim = feature_dim
        self.global_dim = global_dim
        self.count = 0
        self._seen: set[str] = set()
        self._fh = open(path, "wb")
        self._fh.write(MAGIC)
        self._fh.write(struct.pack("<IIII", VERSION, 0, feature_dim, global_dim))

    def add(self, record: Record) -> None:
        if record.image_id in self._seen:
            raise ValueError(f"duplicate image id {record.image_id!r}")
        spatial = np.ascontiguousarray(record.spatial, dtype="<f4")
        global_feat = np.ascontiguousarray(record.global_feat, dtype="<f4").reshape(-1)
        if spatial.ndim != 2 or spatial.shape[1] != self.feature_dim:
            raise ValueError(f"{record.image_id!r}: spatial shape {spatial.shape} "
                             f"does not match D={self.feature_dim}")
        if global_feat.shape[0] != self.global_dim:
            raise ValueError(f"{record.image_id!r}: global length "
                             f"{global_feat.shape[0]} != D_g={self.global_dim}")
        id_bytes = record.image_id.encode("utf-8")
        self._fh.write(struct.pack("<H", len(id_bytes)))
        self._fh.write(id_bytes)
        self._fh.write(struct.pack("<I", spatial.shape[0]))
        self._fh.write(spatial.tobytes(order="C"))
        self._fh.write(global_feat.tobytes())
        self._seen.add(record.image_id)
        self.count += 1

    def close(self) -> None:
        self._fh.seek(8)
        self._fh.write(struct.pack("<I", self.count))
        self._fh.close()

    def __enter__(self) -> "Rcf1Writer":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()
