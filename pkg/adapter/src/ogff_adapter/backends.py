"""Feature extraction backends.

PretrainedBackend runs SuperPoint + DINOv2 from locally available
checkpoints (torch/transformers are imported lazily). ClassicalBackend is a
dependency-light fallback with the same interface so the OGFF bridge works
without downloaded weights.

Both return keypoints in original-image pixels; dense guidance maps are
computed at a bounded resolution (long side <= max_side) and sampled at
proportionally rescaled keypoint coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


def resize_gray(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = image.shape
    ys = np.linspace(0, in_h - 1, out_h)
    xs = np.linspace(0, in_w - 1, out_w)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(image, [grid_y, grid_x], order=1, mode="nearest")


def guidance_resolution(image_size: tuple[int, int], max_side: int) -> tuple[int, int]:
    h, w = image_size
    scale = min(1.0, max_side / max(h, w))
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def sample_dense_map(dense: np.ndarray, locations: np.ndarray,
                     image_size: tuple[int, int]) -> np.ndarray:
    """Bilinearly sample a (h, w, C) map at original-pixel locations.

    Keypoint coordinates are rescaled proportionally from the original image
    size to the map resolution.
    """
    h_map, w_map, _ = dense.shape
    h_img, w_img = image_size
    if locations.shape[0] == 0:
        return np.zeros((0, dense.shape[2]), dtype=np.float64)
    scale_y = h_map / h_img
    scale_x = w_map / w_img
    rows = np.clip(locations[:, 1] * scale_y, 0, h_map - 1)
    cols = np.clip(locations[:, 0] * scale_x, 0, w_map - 1)
    out = np.empty((locations.shape[0], dense.shape[2]))
    for channel in range(dense.shape[2]):
        out[:, channel] = ndimage.map_coordinates(
            dense[:, :, channel], [rows, cols], order=1, mode="nearest")
    return out


@dataclass
class ExtractedFeatures:
    locations: np.ndarray   # N x 2 (x, y) original pixels
    scores: np.ndarray      # N
    descriptors: np.ndarray  # N x C
    guidance: np.ndarray    # N x C'


class ClassicalBackend:
    """Harris keypoints, projected patch descriptors (C=256), pooled
    intensity statistics as the dense guidance map (C'=64)."""

    descriptor_dim = 256
    guidance_dim = 64
    patch_size = 16

    def __init__(self, max_keypoints: int = 1024, max_side: int = 630):
        self.max_keypoints = max_keypoints
        self.max_side = max_side
        rng = np.random.default_rng(0xADA97E6)
        self._desc_proj = rng.normal(
            size=(self.patch_size ** 2, self.descriptor_dim)) / self.patch_size
        self._guide_proj = rng.normal(size=(9, self.guidance_dim)) / 3.0

    def _detect(self, gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ix = ndimage.sobel(gray, axis=1, mode="nearest")
        iy = ndimage.sobel(gray, axis=0, mode="nearest")
        sxx = ndimage.gaussian_filter(ix * ix, 1.5)
        syy = ndimage.gaussian_filter(iy * iy, 1.5)
        sxy = ndimage.gaussian_filter(ix * iy, 1.5)
        response = (sxx * syy - sxy ** 2) - 0.05 * (sxx + syy) ** 2
        peak = response.max()
        if peak <= 1e-4:
            return np.zeros((0, 2)), np.zeros(0)
        border = self.patch_size // 2 + 1
        local_max = ndimage.maximum_filter(response, size=7, mode="nearest")
        keep = (response == local_max) & (response > 0.001 * peak)
        keep[:border, :] = keep[-border:, :] = False
        keep[:, :border] = keep[:, -border:] = False
        ys, xs = np.nonzero(keep)
        if xs.size == 0:
            return np.zeros((0, 2)), np.zeros(0)
        strengths = response[ys, xs]
        order = np.lexsort((xs, ys, -strengths))[: self.max_keypoints]
        return (np.column_stack([xs[order], ys[order]]).astype(np.float64),
                strengths[order] / peak)

    def _describe(self, gray: np.ndarray, locations: np.ndarray) -> np.ndarray:
        half = self.patch_size // 2
        patches = np.empty((locations.shape[0], self.patch_size ** 2))
        for row, (x, y) in enumerate(locations):
            xi, yi = int(round(x)), int(round(y))
            patch = gray[yi - half:yi - half + self.patch_size,
                         xi - half:xi - half + self.patch_size]
            patches[row] = patch.reshape(-1)
        patches /= np.maximum(np.linalg.norm(patches, axis=1, keepdims=True), 1e-12)
        desc = patches @ self._desc_proj
        return desc / np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)

    def _dense_guidance(self, gray: np.ndarray) -> np.ndarray:
        h, w = guidance_resolution(gray.shape, self.max_side)
        small = resize_gray(gray, h, w)
        gx = ndimage.sobel(small, axis=1, mode="nearest")
        gy = ndimage.sobel(small, axis=0, mode="nearest")
        grad = np.hypot(gx, gy)
        maps = []
        for sigma in (4.0, 8.0, 16.0):
            mean = ndimage.gaussian_filter(small, sigma, mode="nearest")
            sq = ndimage.gaussian_filter(small * small, sigma, mode="nearest")
            spread = np.sqrt(np.maximum(sq - mean * mean, 0.0))
            energy = ndimage.gaussian_filter(grad, sigma, mode="nearest")
            maps.extend([mean, spread, energy])
        stacked = np.stack(maps, axis=-1)  # h x w x 9
        return stacked @ self._guide_proj

    def extract(self, rgb: np.ndarray) -> ExtractedFeatures:
        gray = rgb.mean(axis=2) / 255.0 if rgb.ndim == 3 else rgb.astype(np.float64) / 255.0
        locations, scores = self._detect(gray)
        if locations.shape[0] == 0:
            return ExtractedFeatures(
                locations=np.zeros((0, 2)), scores=np.zeros(0),
                descriptors=np.zeros((0, self.descriptor_dim)),
                guidance=np.zeros((0, self.guidance_dim)))
        descriptors = self._describe(gray, locations)
        dense = self._dense_guidance(gray)
        guidance = sample_dense_map(dense, locations, gray.shape)
        return ExtractedFeatures(locations, scores, descriptors, guidance)


class PretrainedBackend:
    """SuperPoint keypoints/descriptors and DINOv2 guidance from local
    checkpoint directories (huggingface format). Keypoints are detected at
    full resolution; the DINOv2 input is bounded to max_side with keypoint
    coordinates rescaled for sampling. Final-layer patch tokens are used."""

    def __init__(self, superpoint_path: str, dinov2_path: str,
                 max_keypoints: int = 1024, max_side: int = 630):
        import torch
        from transformers import (AutoImageProcessor, AutoModel,
                                  SuperPointForKeypointDetection)

        self._torch = torch
        torch.manual_seed(0)
        self.max_keypoints = max_keypoints
        self.max_side = max_side
        self.superpoint = SuperPointForKeypointDetection.from_pretrained(superpoint_path)
        self.superpoint.eval()
        self.sp_processor = AutoImageProcessor.from_pretrained(superpoint_path)
        self.dino = AutoModel.from_pretrained(dinov2_path)
        self.dino.eval()
        self.dino_processor = AutoImageProcessor.from_pretrained(dinov2_path)
        self.descriptor_dim = self.superpoint.config.descriptor_decoder_dim
        self.guidance_dim = self.dino.config.hidden_size

    def _dino_dense(self, rgb: np.ndarray) -> np.ndarray:
        torch = self._torch
        h, w = guidance_resolution(rgb.shape[:2], self.max_side)
        patch = self.dino.config.patch_size
        h = max(patch, (h // patch) * patch)
        w = max(patch, (w // patch) * patch)
        inputs = self.dino_processor(images=rgb, return_tensors="pt",
                                     size={"height": h, "width": w},
                                     do_center_crop=False)
        with torch.no_grad():
            tokens = self.dino(**inputs).last_hidden_state[0]
        tokens = tokens[1:]  # drop CLS
        grid_h, grid_w = h // patch, w // patch
        return tokens.reshape(grid_h, grid_w, -1).numpy().astype(np.float64)

    def extract(self, rgb: np.ndarray) -> ExtractedFeatures:
        torch = self._torch
        if rgb.ndim == 2:
            rgb = np.stack([rgb] * 3, axis=-1)
        inputs = self.sp_processor(images=rgb, return_tensors="pt")
        with torch.no_grad():
            out = self.superpoint(**inputs)
        n = int(out.mask[0].sum())
        keypoints = out.keypoints[0][:n].numpy().astype(np.float64)
        scores = out.scores[0][:n].numpy().astype(np.float64)
        descriptors = out.descriptors[0][:n].numpy().astype(np.float64)
        # SuperPoint emits coordinates in the processor's resized frame,
        # relative when <=1; map back to original pixels
        h_img, w_img = rgb.shape[:2]
        if keypoints.size and keypoints.max() <= 1.5:
            keypoints = keypoints * np.array([w_img - 1, h_img - 1])
        order = np.argsort(-scores, kind="stable")[: self.max_keypoints]
        keypoints, scores, descriptors = keypoints[order], scores[order], descriptors[order]
        inside = ((keypoints[:, 0] >= 0) & (keypoints[:, 0] < w_img)
                  & (keypoints[:, 1] >= 0) & (keypoints[:, 1] < h_img))
        keypoints, scores, descriptors = (keypoints[inside], scores[inside],
                                          descriptors[inside])
        dense = self._dino_dense(rgb)
        guidance = sample_dense_map(dense, keypoints, (h_img, w_img))
        return ExtractedFeatures(keypoints, scores, descriptors, guidance)


def make_backend(name: str, max_keypoints: int, max_side: int,
                 superpoint_path: str | None = None,
                 dinov2_path: str | None = None):
    if name == "classical":
        return ClassicalBackend(max_keypoints=max_keypoints, max_side=max_side)
    if name == "pretrained":
        if not superpoint_path or not dinov2_path:
            raise ValueError("pretrained backend needs --superpoint and --dinov2 paths")
        return PretrainedBackend(superpoint_path, dinov2_path,
                                 max_keypoints=max_keypoints, max_side=max_side)
    raise ValueError(f"unknown backend {name!r}")
