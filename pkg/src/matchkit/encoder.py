"""Positional features: normalized locations -> Fourier embedding -> MLP.

Positions enter attention queries/keys only; they are computed once per
image and stay fixed through all propagation blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc


@dataclass(frozen=True)
class PositionalEncoderParams:
    num_frequencies: int
    mlp: nc.MLPParams  # 4*num_frequencies -> C

    def __post_init__(self):
        if self.mlp.in_dim != 4 * self.num_frequencies:
            raise nc.DimensionError(
                f"encoder mlp input {self.mlp.in_dim} != 4*{self.num_frequencies}"
            )

    @property
    def output_dim(self) -> int:
        return self.mlp.out_dim

    def parameters(self) -> list[nc.Tensor]:
        return self.mlp.parameters()


def init_encoder(num_frequencies: int, out_dim: int, rng: np.random.Generator,
                 hidden: int | None = None) -> PositionalEncoderParams:
    raw = 4 * num_frequencies
    widths = [raw, hidden or max(raw, out_dim), out_dim]
    return PositionalEncoderParams(num_frequencies=num_frequencies, mlp=nc.mlp_init(widths, rng))


def fourier_features(locations: np.ndarray, image_size: tuple[int, int],
                     num_frequencies: int) -> np.ndarray:
    """sin/cos features of locations normalized per axis to [-1, 1].

    Frequencies pi * 2^0 .. pi * 2^(F-1); output columns are grouped per
    frequency as [sin(fx), cos(fx), sin(fy), cos(fy)].
    """
    h, w = image_size
    if h <= 0 or w <= 0:
        raise ValueError("zero-sized image")
    loc = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    if loc.size and (loc[:, 0].min() < 0 or loc[:, 0].max() >= w
                     or loc[:, 1].min() < 0 or loc[:, 1].max() >= h):
        raise ValueError("locations outside image bounds")
    nx = loc[:, 0] / w * 2.0 - 1.0
    ny = loc[:, 1] / h * 2.0 - 1.0
    cols = []
    for f in range(num_frequencies):
        freq = np.pi * (2.0 ** f)
        cols.extend([np.sin(freq * nx), np.cos(freq * nx), np.sin(freq * ny), np.cos(freq * ny)])
    return np.column_stack(cols) if cols else np.zeros((loc.shape[0], 0))


def encode_positions(locations: np.ndarray, image_size: tuple[int, int],
                     params: PositionalEncoderParams) -> nc.Tensor:
    """Per-keypoint positional features p (N x C), differentiable in the MLP
    parameters but not in the locations."""
    raw = fourier_features(locations, image_size, params.num_frequencies)
    return nc.mlp_apply(params.mlp, nc.Tensor(raw))
