"""Synthetic homography pair generation: procedural textures, corner
keypoints with patch descriptors, pooled guidance features, and ground-truth
match labels.

Images are 2-d float arrays in [0, 1]. The only external image format
accepted is 8-bit grayscale PGM (P5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .features import FeatureSet, PairRecord
from .geomeval import apply_homography

GrayImage = np.ndarray

# fixed seeds for the random projections: part of the extractor definition,
# independent of any per-pair randomness
_DESCRIPTOR_PROJECTION_SEED = 0x5EED01
_GUIDANCE_PROJECTION_SEED = 0x5EED02


class DegenerateQuadError(RuntimeError):
    pass


class InsufficientKeypointsError(RuntimeError):
    pass


@dataclass
class PhotometricJitter:
    brightness: float = 0.25
    contrast: float = 0.4
    noise_sigma: float = 0.01


@dataclass
class HomographyPairSpec:
    crop_size: tuple[int, int] = (240, 240)  # (h, w)
    corner_perturbation_radius: float = 50.0
    photometric_jitter: PhotometricJitter = field(default_factory=PhotometricJitter)
    rng_seed: int = 0

    def __post_init__(self):
        if self.corner_perturbation_radius < 0:
            raise ValueError("perturbation radius must be >= 0")


@dataclass
class SurrogateExtractorConfig:
    max_keypoints: int = 256
    corner_threshold: float = 0.001  # relative to the max Harris response
    patch_size: int = 8
    guidance_pool_cell: int = 16
    descriptor_dim: int = 64
    guidance_dim: int = 32
    nms_radius: int = 3

    def __post_init__(self):
        if self.max_keypoints < 4:
            raise ValueError("max_keypoints must be >= 4")
        if self.patch_size < 2:
            raise ValueError("patch_size too small")

    @property
    def border(self) -> int:
        return self.patch_size // 2 + 1


# ---------------------------------------------------------------------------
# PGM io


def read_pgm(path) -> GrayImage:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ValueError("only binary 8-bit PGM (P5) is supported")
    # header tokens: magic, width, height, maxval; comments start with '#'
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float64) / 255.0


def write_pgm(image: GrayImage, path) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


# ---------------------------------------------------------------------------
# procedural textures


def _noise_octaves(size: int, rng: np.random.Generator, octaves=(4, 8, 16, 32)) -> GrayImage:
    out = np.zeros((size, size))
    amp_total = 0.0
    for i, cells in enumerate(octaves):
        amp = 1.0 / (i + 1)
        grid = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1))
        coords = np.linspace(0.0, cells, size)
        cy, cx = np.meshgrid(coords, coords, indexing="ij")
        out += amp * ndimage.map_coordinates(grid, [cy, cx], order=1, mode="nearest")
        amp_total += amp
    return out / amp_total


def _paint_shapes(canvas: GrayImage, rng: np.random.Generator, count: int) -> GrayImage:
    size = canvas.shape[0]
    for _ in range(count):
        cx, cy = rng.uniform(0.1 * size, 0.9 * size, size=2)
        a = rng.uniform(size / 32, size / 8)
        b = rng.uniform(size / 32, size / 8)
        theta = rng.uniform(0, math.pi)
        value = rng.uniform(0.0, 1.0)
        rect = rng.random() < 0.5
        ct, st = math.cos(theta), math.sin(theta)
        reach = math.hypot(a, b)
        x_lo, x_hi = max(0, int(cx - reach)), min(size, int(cx + reach) + 1)
        y_lo, y_hi = max(0, int(cy - reach)), min(size, int(cy + reach) + 1)
        yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        if rect:
            inside = (np.abs(u) <= a) & (np.abs(v) <= b)
        else:
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        patch = canvas[y_lo:y_hi, x_lo:x_hi]
        patch[inside] = value
    return canvas


def procedural_texture(kind: str, size: int, rng: np.random.Generator) -> GrayImage:
    """Deterministic per-seed source images: 'checker', 'noise' or 'blobs'."""
    if size < 64:
        raise ValueError("texture size must be >= 64")
    if kind == "checker":
        cell = max(size // 8, 8)
        yy, xx = np.mgrid[0:size, 0:size]
        return np.where(((yy // cell) + (xx // cell)) % 2 == 0, 0.25, 0.75)
    if kind == "noise":
        return _noise_octaves(size, rng)
    if kind == "blobs":
        canvas = 0.3 + 0.4 * _noise_octaves(size, rng)
        canvas = _paint_shapes(canvas, rng, count=max(24, size // 2))
        return np.clip(ndimage.gaussian_filter(canvas, sigma=0.6), 0.0, 1.0)
    raise ValueError(f"unknown texture kind {kind!r}")


# ---------------------------------------------------------------------------
# surrogate keypoints and features


def harris_corners(image: GrayImage, max_keypoints: int, threshold_rel: float,
                   nms_radius: int, border: int,
                   min_response: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Corner locations (x, y) and scores in [0, 1], strongest first.

    min_response is an absolute floor on the peak: structureless images
    (noise on a constant background peaks around 1e-5) yield no corners.
    """
    img = np.asarray(image, dtype=np.float64)
    ix = ndimage.sobel(img, axis=1, mode="nearest")
    iy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, sigma=1.5)
    syy = ndimage.gaussian_filter(iy * iy, sigma=1.5)
    sxy = ndimage.gaussian_filter(ix * iy, sigma=1.5)
    response = (sxx * syy - sxy ** 2) - 0.05 * (sxx + syy) ** 2
    peak = response.max()
    if peak <= min_response:
        return np.zeros((0, 2)), np.zeros(0)
    local_max = ndimage.maximum_filter(response, size=2 * nms_radius + 1, mode="nearest")
    keep = (response == local_max) & (response > threshold_rel * peak)
    keep[:border, :] = keep[-border:, :] = False
    keep[:, :border] = keep[:, -border:] = False
    ys, xs = np.nonzero(keep)
    if xs.size == 0:
        return np.zeros((0, 2)), np.zeros(0)
    strengths = response[ys, xs]
    order = np.lexsort((xs, ys, -strengths))[:max_keypoints]
    xs, ys, strengths = xs[order], ys[order], strengths[order]
    return np.column_stack([xs, ys]).astype(np.float64), strengths / peak


def _projection(seed: int, in_dim: int, out_dim: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 1000003 * in_dim + out_dim)
    return rng.normal(size=(in_dim, out_dim)) / math.sqrt(in_dim)


def patch_descriptors(image: GrayImage, locations: np.ndarray,
                      cfg: SurrogateExtractorConfig) -> np.ndarray:
    """L2-normalized intensity patches pushed through a fixed projection."""
    ps = cfg.patch_size
    half = ps // 2
    patches = np.empty((locations.shape[0], ps * ps))
    for row, (x, y) in enumerate(locations):
        xi, yi = int(round(x)), int(round(y))
        patch = image[yi - half:yi - half + ps, xi - half:xi - half + ps]
        patches[row] = patch.reshape(-1)
    norms = np.linalg.norm(patches, axis=1, keepdims=True)
    patches = patches / np.maximum(norms, 1e-12)
    proj = _projection(_DESCRIPTOR_PROJECTION_SEED, ps * ps, cfg.descriptor_dim)
    desc = patches @ proj
    desc /= np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
    return desc


def guidance_features(image: GrayImage, locations: np.ndarray,
                      cfg: SurrogateExtractorConfig) -> np.ndarray:
    """Coarse pooled intensity statistics sampled at the keypoints.

    Mean / spread / gradient-energy maps at three scales around the pooling
    cell, bilinearly sampled, then a fixed projection to the guidance dim.
    Mimics the "coarse but broad" role of a pretrained backbone: nearby and
    similar-looking regions end up with similar vectors.
    """
    img = np.asarray(image, dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    grad = np.hypot(gx, gy)
    sigmas = (cfg.guidance_pool_cell / 4.0, cfg.guidance_pool_cell / 2.0,
              float(cfg.guidance_pool_cell))
    maps = []
    for sigma in sigmas:
        mean = ndimage.gaussian_filter(img, sigma=sigma, mode="nearest")
        sq = ndimage.gaussian_filter(img * img, sigma=sigma, mode="nearest")
        spread = np.sqrt(np.maximum(sq - mean * mean, 0.0))
        energy = ndimage.gaussian_filter(grad, sigma=sigma, mode="nearest")
        maps.extend([mean, spread, energy])
    coords = [locations[:, 1], locations[:, 0]]  # row, col
    raw = np.column_stack([
        ndimage.map_coordinates(m, coords, order=1, mode="nearest") for m in maps
    ])
    proj = _projection(_GUIDANCE_PROJECTION_SEED, raw.shape[1], cfg.guidance_dim)
    return raw @ proj


def extract_surrogate_features(image: GrayImage, cfg: SurrogateExtractorConfig,
                               image_id: str) -> FeatureSet:
    locations, scores = harris_corners(
        image, cfg.max_keypoints, cfg.corner_threshold, cfg.nms_radius, cfg.border)
    if locations.shape[0]:
        descriptors = patch_descriptors(image, locations, cfg)
        guidance = guidance_features(image, locations, cfg)
    else:
        descriptors = np.zeros((0, cfg.descriptor_dim))
        guidance = np.zeros((0, cfg.guidance_dim))
    return FeatureSet(
        image_id=image_id,
        image_size=image.shape,
        locations=locations,
        scores=scores,
        descriptors=descriptors,
        guidance=guidance,
    )


# ---------------------------------------------------------------------------
# homography sampling and pair assembly


def _crop_corners(crop_size: tuple[int, int]) -> np.ndarray:
    h, w = crop_size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def _quad_is_convex(quad: np.ndarray, min_area: float) -> bool:
    for i in range(4):
        u = quad[(i + 1) % 4] - quad[i]
        v = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        if u[0] * v[1] - u[1] * v[0] < min_area:
            return False
    return True


def _homography_exact(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    h = vt[-1].reshape(3, 3)
    if abs(h[2, 2]) < 1e-12 or abs(np.linalg.det(h)) < 1e-12:
        return None
    return h / h[2, 2]


def sample_homography(spec: HomographyPairSpec, rng: np.random.Generator) -> np.ndarray:
    """Homography displacing each crop corner by at most the configured
    radius (L-inf); normalized so H[2][2] == 1."""
    corners = _crop_corners(spec.crop_size)
    rho = spec.corner_perturbation_radius
    min_area = 0.05 * min(spec.crop_size) ** 2
    for _ in range(100):
        delta = rng.uniform(-rho, rho, size=(4, 2)) if rho > 0 else np.zeros((4, 2))
        quad = corners + delta
        if not _quad_is_convex(quad, min_area):
            continue
        h = _homography_exact(corners, quad)
        if h is None:
            continue
        return h
    raise DegenerateQuadError("no valid corner perturbation found in 100 attempts")


def max_corner_displacement(h: np.ndarray, crop_size: tuple[int, int]) -> float:
    corners = _crop_corners(crop_size)
    return float(np.abs(apply_homography(h, corners) - corners).max())


def _apply_jitter(image: GrayImage, jitter: PhotometricJitter,
                  rng: np.random.Generator) -> GrayImage:
    alpha = rng.uniform(1.0 - jitter.contrast, 1.0 + jitter.contrast)
    beta = rng.uniform(-jitter.brightness, jitter.brightness)
    out = alpha * (image - 0.5) + 0.5 + beta
    if jitter.noise_sigma > 0:
        out = out + rng.normal(0.0, jitter.noise_sigma, size=image.shape)
    return np.clip(out, 0.0, 1.0)


def warp_crop(source: GrayImage, origin: tuple[int, int], crop_size: tuple[int, int],
              h: np.ndarray) -> GrayImage:
    """Sample the warped view: B(p) = source(H^-1 p + origin)."""
    hh, ww = crop_size
    y0, x0 = origin
    h_inv = np.linalg.inv(h)
    yy, xx = np.mgrid[0:hh, 0:ww].astype(np.float64)
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(hh * ww)])
    mapped = h_inv @ pts
    sx = mapped[0] / mapped[2] + x0
    sy = mapped[1] / mapped[2] + y0
    values = ndimage.map_coordinates(source, [sy, sx], order=1, mode="constant", cval=0.0)
    return values.reshape(hh, ww)


def symmetric_reprojection_matches(loc_a: np.ndarray, loc_b: np.ndarray, h: np.ndarray,
                                   threshold_px: float) -> list[tuple[int, int]]:
    """Mutually-nearest pairs whose reprojection error stays below the
    threshold in both directions (forward via H, backward via H^-1)."""
    if loc_a.shape[0] == 0 or loc_b.shape[0] == 0:
        return []
    proj_a = apply_homography(h, loc_a)
    proj_b = apply_homography(np.linalg.inv(h), loc_b)
    d_fwd = np.linalg.norm(proj_a[:, None, :] - loc_b[None, :, :], axis=2)
    d_bwd = np.linalg.norm(loc_a[:, None, :] - proj_b[None, :, :], axis=2)
    dist = np.maximum(d_fwd, d_bwd)
    best_j = dist.argmin(axis=1)
    best_i = dist.argmin(axis=0)
    matches = []
    for i, j in enumerate(best_j):
        if best_i[j] == i and dist[i, j] < threshold_px:
            matches.append((i, int(j)))
    return matches


def make_pair(image: GrayImage, spec: HomographyPairSpec, extractor: SurrogateExtractorConfig,
              rng: np.random.Generator, pair_id: str = "pair") -> PairRecord:
    """Build one PairRecord: crop + warped crop, surrogate features on both
    views, homography ground truth and <3px symmetric match labels."""
    img = np.asarray(image, dtype=np.float64)
    ch, cw = spec.crop_size
    margin = int(math.ceil(spec.corner_perturbation_radius)) + extractor.border + 4
    if img.shape[0] < ch + 2 * margin or img.shape[1] < cw + 2 * margin:
        raise ValueError(
            f"image {img.shape} too small for crop {spec.crop_size} with margin {margin}")
    y0 = int(rng.integers(margin, img.shape[0] - ch - margin + 1))
    x0 = int(rng.integers(margin, img.shape[1] - cw - margin + 1))
    h = sample_homography(spec, rng)

    view_a = img[y0:y0 + ch, x0:x0 + cw].copy()
    view_b = warp_crop(img, (y0, x0), spec.crop_size, h)
    view_a = _apply_jitter(view_a, spec.photometric_jitter, rng)
    view_b = _apply_jitter(view_b, spec.photometric_jitter, rng)

    fs_a = extract_surrogate_features(view_a, extractor, f"{pair_id}_a")
    fs_b = extract_surrogate_features(view_b, extractor, f"{pair_id}_b")
    if fs_a.num_keypoints < 8 or fs_b.num_keypoints < 8:
        raise InsufficientKeypointsError(
            f"insufficient keypoints ({fs_a.num_keypoints}, {fs_b.num_keypoints})")
    gt_matches = symmetric_reprojection_matches(
        np.asarray(fs_a.locations, dtype=np.float64),
        np.asarray(fs_b.locations, dtype=np.float64),
        h, threshold_px=3.0)
    return PairRecord(set_a=fs_a, set_b=fs_b, gt_transform=h, gt_matches=gt_matches)
