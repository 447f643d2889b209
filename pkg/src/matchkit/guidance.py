"""Inter-image graph pruning from coarse guidance features.

For every target keypoint, only the top fraction of the other image's
keypoints (by guidance similarity) may send information during
cross-attention. Masks are built once per pair and reused by every layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GuidanceMask:
    """Row i = source keypoints allowed to send to target keypoint i."""

    mask: np.ndarray  # bool, n_targets x n_sources
    keep_ratio: float

    def __post_init__(self):
        if not (0.0 < self.keep_ratio <= 1.0):
            raise ValueError(f"keep_ratio {self.keep_ratio} outside (0, 1]")
        m = np.asarray(self.mask, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def row_count(self) -> int:
        # true entries per row; constant across rows by construction
        return int(self.mask[0].sum()) if self.mask.shape[0] else 0


def selected_per_row(n_sources: int, keep_ratio: float) -> int:
    return max(1, int(np.floor(keep_ratio * n_sources)))


def topk_rows(sim: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask with the k largest entries per row set.

    Ties break toward the lower column index so selection is reproducible.
    """
    n, m = sim.shape
    if not (1 <= k <= m):
        raise ValueError(f"k={k} outside [1, {m}]")
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, m), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def build_inter_masks(g_a: np.ndarray, g_b: np.ndarray,
                      keep_ratio: float) -> tuple[GuidanceMask, GuidanceMask]:
    """Directed masks (b_to_a, a_to_b) from one shared similarity matrix.

    Expects channel-normalized guidance features; similarity is the plain
    dot product. Each direction takes an independent per-row top-k (the
    a_to_b mask is not the transpose of b_to_a).
    """
    g_a = np.asarray(g_a, dtype=np.float64)
    g_b = np.asarray(g_b, dtype=np.float64)
    if g_a.ndim != 2 or g_b.ndim != 2 or g_a.shape[1] != g_b.shape[1]:
        raise ValueError("guidance features must share the channel dim")
    n, m = g_a.shape[0], g_b.shape[0]
    if n < 1 or m < 1:
        raise ValueError("need at least one keypoint on each side")
    sim = g_a @ g_b.T
    b_to_a = GuidanceMask(topk_rows(sim, selected_per_row(m, keep_ratio)), keep_ratio)
    a_to_b = GuidanceMask(topk_rows(sim.T, selected_per_row(n, keep_ratio)), keep_ratio)
    return b_to_a, a_to_b


def build_intra_mask(g: np.ndarray, keep_ratio: float) -> GuidanceMask:
    """Ablation only: guidance-pruned self-attention graph."""
    g = np.asarray(g, dtype=np.float64)
    sim = g @ g.T
    return GuidanceMask(topk_rows(sim, selected_per_row(g.shape[0], keep_ratio)), keep_ratio)
