"""Extraction jobs: images in, OGFF files out."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import ClassicalBackend
from .ogff import ImageFeatures, write_ogff

log = logging.getLogger("ogff_adapter")


@dataclass
class ExtractionJob:
    image_paths: list[Path]
    out_dir: Path
    max_side: int = 630       # bound on the guidance-extraction resolution
    max_keypoints: int = 1024

    def __post_init__(self):
        self.image_paths = [Path(p) for p in self.image_paths]
        self.out_dir = Path(self.out_dir)
        missing = [p for p in self.image_paths if not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing image(s): {missing}")
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be >= 1")


@dataclass
class ExtractionResult:
    written: list[Path] = field(default_factory=list)
    failed: list[tuple[Path, str]] = field(default_factory=list)


def load_image_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def extract(job: ExtractionJob, backend=None) -> ExtractionResult:
    """Run the backend on every image; unreadable files are reported and
    skipped, the job continues."""
    backend = backend or ClassicalBackend(max_keypoints=job.max_keypoints,
                                          max_side=job.max_side)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    result = ExtractionResult()
    for path in job.image_paths:
        try:
            rgb = load_image_rgb(path)
        except Exception as exc:  # unreadable image: per-file error, keep going
            log.error("skipping %s: %s", path, exc)
            result.failed.append((path, str(exc)))
            continue
        feats = backend.extract(rgb)
        out_path = job.out_dir / (path.stem + ".ogff")
        write_ogff(ImageFeatures(
            image_size=rgb.shape[:2],
            locations=feats.locations,
            scores=feats.scores,
            descriptors=feats.descriptors,
            guidance=feats.guidance,
        ), out_path)
        log.info("%s: %d keypoints -> %s", path.name, feats.locations.shape[0], out_path)
        result.written.append(out_path)
    return result
