"""Standalone OGFF v1 writer/reader.

Deliberately self-contained (no import of the matcher package): the binary
format is the contract between the two sides.

Layout (little-endian): magic "OGFF", u32 version=1, u32 N, u32 C, u32 C',
u32 height, u32 width; then float32 arrays locations (N x 2), scores (N),
descriptors (N x C), guidance (N x C').
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"OGFF"
VERSION = 1


@dataclass
class ImageFeatures:
    image_size: tuple[int, int]  # (height, width)
    locations: np.ndarray        # N x 2 float32, (x, y) pixels
    scores: np.ndarray           # N float32
    descriptors: np.ndarray      # N x C float32
    guidance: np.ndarray         # N x C' float32

    def __post_init__(self):
        self.locations = np.ascontiguousarray(self.locations, dtype=np.float32).reshape(-1, 2)
        n = self.locations.shape[0]
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float32).reshape(n)
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        self.guidance = np.ascontiguousarray(self.guidance, dtype=np.float32)
        assert self.descriptors.shape[0] == n and self.guidance.shape[0] == n


def write_ogff(features: ImageFeatures, path) -> None:
    h, w = features.image_size
    n = features.locations.shape[0]
    c = features.descriptors.shape[1]
    cp = features.guidance.shape[1]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<6I", VERSION, n, c, cp, int(h), int(w)))
        f.write(features.locations.tobytes())
        f.write(features.scores.tobytes())
        f.write(features.descriptors.tobytes())
        f.write(features.guidance.tobytes())


def read_ogff(path) -> ImageFeatures:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}")
    version, n, c, cp, h, w = struct.unpack_from("<6I", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    offset = 28

    def take(count, shape):
        nonlocal offset
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        return arr.copy()

    return ImageFeatures(
        image_size=(h, w),
        locations=take(n * 2, (n, 2)),
        scores=take(n, (n,)),
        descriptors=take(n * c, (n, c)),
        guidance=take(n * cp, (n, cp)),
    )
