"""Keypoint feature data model and the OGFF binary feature-file format.

OGFF v1 layout (little-endian):
    magic  "OGFF" (4 bytes)
    u32    version = 1
    u32    N   number of keypoints
    u32    C   descriptor dim
    u32    C'  guidance dim
    u32    image height (px)
    u32    image width (px)
    then arrays, in order, all float32:
    locations  N x 2   (x, y in pixels)
    scores     N
    descriptors N x C
    guidance   N x C'
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

MAGIC = b"OGFF"
VERSION = 1


class FormatError(ValueError):
    """Malformed feature file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class FeatureSet:
    """All per-keypoint data for one image.

    Arrays are float32 (the on-disk precision) so file round-trips are
    bit-exact. `positional` is filled later by the positional encoder and is
    not part of the file format.
    """

    image_id: str
    image_size: tuple[int, int]  # (height, width) in pixels
    locations: np.ndarray        # N x 2, (x, y)
    scores: np.ndarray           # N, in [0, 1]
    descriptors: np.ndarray      # N x C
    guidance: np.ndarray         # N x C'
    positional: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.locations = np.ascontiguousarray(self.locations, dtype=np.float32).reshape(-1, 2)
        n = self.locations.shape[0]
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float32).reshape(n)
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        self.guidance = np.ascontiguousarray(self.guidance, dtype=np.float32)
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != n:
            raise ValueError("descriptors must be an N x C matrix")
        if self.guidance.ndim != 2 or self.guidance.shape[0] != n:
            raise ValueError("guidance must be an N x C' matrix")
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ValueError("image size must be positive")
        if n:
            x, y = self.locations[:, 0], self.locations[:, 1]
            if x.min() < 0 or y.min() < 0 or x.max() >= w or y.max() >= h:
                raise ValueError("keypoint locations outside image bounds")
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptor rows must be finite")

    @property
    def num_keypoints(self) -> int:
        return self.locations.shape[0]

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def guidance_dim(self) -> int:
        return self.guidance.shape[1]


Homography = np.ndarray  # 3x3, H[2,2] == 1
Affine = np.ndarray      # 2x3


@dataclass
class RelativePose:
    rotation: np.ndarray      # 3x3, orthonormal, det +1
    translation: np.ndarray   # 3
    intrinsics_a: np.ndarray  # 3x3
    intrinsics_b: np.ndarray  # 3x3


@dataclass
class PairRecord:
    """One training/eval sample: two feature sets plus ground truth."""

    set_a: FeatureSet
    set_b: FeatureSet
    gt_transform: Union[Homography, Affine, RelativePose]
    gt_matches: Optional[list[tuple[int, int]]] = None

    def __post_init__(self):
        t = self.gt_transform
        if isinstance(t, RelativePose):
            r = np.asarray(t.rotation, dtype=np.float64)
            if abs(np.linalg.det(r) - 1.0) > 1e-6 or np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
                raise ValueError("rotation must be orthonormal with det +1")
        else:
            t = np.asarray(t, dtype=np.float64)
            if t.shape == (3, 3):
                if abs(np.linalg.det(t)) < 1e-12:
                    raise ValueError("homography must be invertible")
            elif t.shape != (2, 3):
                raise ValueError(f"unsupported transform shape {t.shape}")
            self.gt_transform = t

    @property
    def kind(self) -> str:
        if isinstance(self.gt_transform, RelativePose):
            return "pose"
        return "homography" if self.gt_transform.shape == (3, 3) else "affine"


def normalize_channels(g: np.ndarray, variance_floor: float = 1e-8) -> np.ndarray:
    """Zero-mean, unit-variance per column. Constant columns map to zero."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 1:
        raise ValueError("expected a non-empty N x C' matrix")
    mean = g.mean(axis=0, keepdims=True)
    centered = g - mean
    std = np.sqrt(np.maximum(centered.var(axis=0, keepdims=True), variance_floor))
    out = centered / std
    # a floored (constant) column is centered noise at ~1e-4 scale; snap to 0
    floored = centered.var(axis=0) <= variance_floor
    out[:, floored] = 0.0
    return out


# ---------------------------------------------------------------------------
# OGFF io


def write_features(fs: FeatureSet, path) -> None:
    h, w = fs.image_size
    header = MAGIC + struct.pack(
        "<6I", VERSION, fs.num_keypoints, fs.descriptor_dim, fs.guidance_dim, h, w
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(fs.locations.tobytes())
        f.write(fs.scores.tobytes())
        f.write(fs.descriptors.tobytes())
        f.write(fs.guidance.tobytes())


def read_features(path) -> FeatureSet:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 28:
        raise FormatError("truncated header", len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    version, n, c, cp, h, w = struct.unpack_from("<6I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    offset = 28
    arrays = []
    for name, count in (
        ("locations", n * 2),
        ("scores", n),
        ("descriptors", n * c),
        ("guidance", n * cp),
    ):
        nbytes = count * 4
        if len(blob) < offset + nbytes:
            raise FormatError(f"truncated {name} array", offset)
        arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=offset))
        offset += nbytes
    if offset != len(blob):
        raise FormatError("trailing bytes after arrays", offset)
    locations, scores, descriptors, guidance = arrays
    return FeatureSet(
        image_id=path.stem,
        image_size=(h, w),
        locations=locations.reshape(n, 2),
        scores=scores,
        descriptors=descriptors.reshape(n, c),
        guidance=guidance.reshape(n, cp),
    )


# ---------------------------------------------------------------------------
# ground-truth JSON sidecar


def write_ground_truth(pair: PairRecord, path) -> None:
    doc: dict = {"type": pair.kind}
    t = pair.gt_transform
    if isinstance(t, RelativePose):
        doc["matrix"] = np.column_stack([t.rotation, t.translation]).tolist()
        doc["intrinsics_a"] = np.asarray(t.intrinsics_a, dtype=float).tolist()
        doc["intrinsics_b"] = np.asarray(t.intrinsics_b, dtype=float).tolist()
    else:
        doc["matrix"] = np.asarray(t, dtype=float).tolist()
    if pair.gt_matches is not None:
        doc["gt_matches"] = [[int(i), int(j)] for i, j in pair.gt_matches]
    with open(path, "w") as f:
        json.dump(doc, f)


def read_ground_truth(path):
    """Returns (gt_transform, gt_matches)."""
    with open(path) as f:
        doc = json.load(f)
    kind = doc.get("type")
    matrix = np.asarray(doc["matrix"], dtype=np.float64)
    matches = doc.get("gt_matches")
    if matches is not None:
        matches = [(int(i), int(j)) for i, j in matches]
    if kind == "pose":
        pose = RelativePose(
            rotation=matrix[:, :3],
            translation=matrix[:, 3],
            intrinsics_a=np.asarray(doc["intrinsics_a"], dtype=np.float64),
            intrinsics_b=np.asarray(doc["intrinsics_b"], dtype=np.float64),
        )
        return pose, matches
    if kind in ("homography", "affine"):
        return matrix, matches
    raise ValueError(f"unknown ground-truth type {kind!r}")


def load_pair(pair_dir) -> PairRecord:
    """Read the a.ogff / b.ogff / gt.json triplet of one dataset pair."""
    pair_dir = Path(pair_dir)
    gt, matches = read_ground_truth(pair_dir / "gt.json")
    return PairRecord(
        set_a=read_features(pair_dir / "a.ogff"),
        set_b=read_features(pair_dir / "b.ogff"),
        gt_transform=gt,
        gt_matches=matches,
    )


def save_pair(pair: PairRecord, pair_dir) -> None:
    pair_dir = Path(pair_dir)
    pair_dir.mkdir(parents=True, exist_ok=True)
    write_features(pair.set_a, pair_dir / "a.ogff")
    write_features(pair.set_b, pair_dir / "b.ogff")
    write_ground_truth(pair, pair_dir / "gt.json")
