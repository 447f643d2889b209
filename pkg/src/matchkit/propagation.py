"""Stacked information propagation with position-guided attention.

Each block runs one self-attention layer per image followed by one
guidance-masked cross-attention layer per direction. Queries and keys mix
descriptors with positional features; values are built from descriptors
alone, so position never leaks into the updated representation. Residual
updates go through a small MLP on [d | delta_d].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numcore as nc
from .guidance import GuidanceMask


class EmptyKeypointsError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionLayerParams:
    """One attention layer; weights are never shared across layers."""

    w_q: nc.Tensor
    b_q: nc.Tensor
    w_k: nc.Tensor
    b_k: nc.Tensor
    w_v: nc.Tensor
    b_v: nc.Tensor
    out_mlp: nc.MLPParams  # 2C -> C
    num_heads: int

    def __post_init__(self):
        c = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (c, c):
                raise nc.DimensionError("attention projection must be C x C")
        if self.out_mlp.in_dim != 2 * c or self.out_mlp.out_dim != c:
            raise nc.DimensionError("out_mlp must map 2C -> C")
        if c % self.num_heads != 0:
            raise nc.DimensionError(f"C={c} not divisible by {self.num_heads} heads")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    def parameters(self) -> list[nc.Tensor]:
        return [self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v] \
            + self.out_mlp.parameters()


@dataclass(frozen=True)
class PropagationBlock:
    self_a: AttentionLayerParams
    self_b: AttentionLayerParams
    cross_a_from_b: AttentionLayerParams
    cross_b_from_a: AttentionLayerParams

    def layers(self) -> tuple[AttentionLayerParams, ...]:
        return (self.self_a, self.self_b, self.cross_a_from_b, self.cross_b_from_a)


@dataclass(frozen=True)
class PropagationStack:
    blocks: tuple[PropagationBlock, ...]

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ValueError("stack needs at least one block")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def parameters(self) -> list[nc.Tensor]:
        out = []
        for block in self.blocks:
            for layer in block.layers():
                out.extend(layer.parameters())
        return out


@dataclass
class PropagationStats:
    """Instrumentation: logical score pairs entering attention softmaxes."""

    cross_scored_pairs: int = 0
    self_scored_pairs: int = 0
    cross_calls: int = 0


def init_attention_layer(dim: int, num_heads: int, rng: np.random.Generator,
                         out_hidden: Optional[int] = None) -> AttentionLayerParams:
    """Glorot projections; out_mlp final layer zero so the layer starts as
    the identity on descriptors."""
    s = math.sqrt(6.0 / (2 * dim))

    def proj():
        return nc.Tensor(rng.uniform(-s, s, size=(dim, dim))), nc.Tensor(np.zeros(dim))

    w_q, b_q = proj()
    w_k, b_k = proj()
    w_v, b_v = proj()
    hidden = out_hidden or 2 * dim
    out_mlp = nc.mlp_init([2 * dim, hidden, dim], rng, zero_last=True)
    return AttentionLayerParams(w_q, b_q, w_k, b_k, w_v, b_v, out_mlp, num_heads)


def init_stack(dim: int, num_blocks: int, num_heads: int,
               rng: np.random.Generator) -> PropagationStack:
    blocks = tuple(
        PropagationBlock(
            self_a=init_attention_layer(dim, num_heads, rng),
            self_b=init_attention_layer(dim, num_heads, rng),
            cross_a_from_b=init_attention_layer(dim, num_heads, rng),
            cross_b_from_a=init_attention_layer(dim, num_heads, rng),
        )
        for _ in range(num_blocks)
    )
    return PropagationStack(blocks=blocks)


# ---------------------------------------------------------------------------
# attention


def attention_weights(q: nc.Tensor, k: nc.Tensor, mask: Optional[np.ndarray],
                      num_heads: int) -> list[nc.Tensor]:
    """Per-head softmax(q k^T / sqrt(C_h)) weight matrices."""
    c = q.shape[1]
    ch = c // num_heads
    weights = []
    for h in range(num_heads):
        qh = nc.slice_cols(q, h * ch, (h + 1) * ch)
        kh = nc.slice_cols(k, h * ch, (h + 1) * ch)
        scores = nc.scale(nc.matmul(qh, nc.transpose(kh)), 1.0 / math.sqrt(ch))
        weights.append(nc.softmax_rows(scores, mask))
    return weights


def aggregate_values(weights: list[nc.Tensor], v: nc.Tensor) -> nc.Tensor:
    """Weighted sums of value rows, heads concatenated. Positional features
    never enter here: this stage sees descriptors-derived values only."""
    num_heads = len(weights)
    c = v.shape[1]
    ch = c // num_heads
    parts = None
    for h, w in enumerate(weights):
        vh = nc.slice_cols(v, h * ch, (h + 1) * ch)
        out_h = nc.matmul(w, vh)
        parts = out_h if parts is None else nc.concat_cols(parts, out_h)
    return parts


def position_guided_attention(d_tgt: nc.Tensor, p_tgt: Optional[nc.Tensor],
                              d_src: nc.Tensor, p_src: Optional[nc.Tensor],
                              mask: Optional[np.ndarray],
                              params: AttentionLayerParams) -> nc.Tensor:
    """One residual attention update of the target descriptors.

    q = W_q(d_tgt + p_tgt) + b_q, k = W_k(d_src + p_src) + b_k,
    v = W_v(d_src) + b_v; d <- d + MLP([d | softmax(q k^T / sqrt(C_h)) v]).
    Passing p as None drops the positional term. Fully masked rows yield a
    zero update, leaving the residual to pass d through.
    """
    q_in = nc.add(d_tgt, p_tgt) if p_tgt is not None else d_tgt
    k_in = nc.add(d_src, p_src) if p_src is not None else d_src
    q = nc.affine(q_in, params.w_q, params.b_q)
    k = nc.affine(k_in, params.w_k, params.b_k)
    v = nc.affine(d_src, params.w_v, params.b_v)
    weights = attention_weights(q, k, mask, params.num_heads)
    delta = aggregate_values(weights, v)
    update = nc.mlp_apply(params.out_mlp, nc.concat_cols(d_tgt, delta))
    if mask is not None:
        dead = nc.fully_masked_rows(mask)
        if dead.any():
            keep = np.repeat((~dead)[:, None], d_tgt.shape[1], axis=1).astype(np.float64)
            update = nc.mul(update, nc.Tensor(keep))
    return nc.add(d_tgt, update)


# ---------------------------------------------------------------------------
# stack execution


def run_stack(stack: PropagationStack,
              d_a: nc.Tensor, p_a: Optional[nc.Tensor],
              d_b: nc.Tensor, p_b: Optional[nc.Tensor],
              mask_b_to_a: Optional[np.ndarray],
              mask_a_to_b: Optional[np.ndarray],
              position_mode: str = "full",
              intra_mask_a: Optional[np.ndarray] = None,
              intra_mask_b: Optional[np.ndarray] = None,
              stats: Optional[PropagationStats] = None) -> tuple[nc.Tensor, nc.Tensor]:
    """Refine both descriptor sets through all blocks.

    Per block: self-attention on A and B, then both cross directions reading
    the other image as it was after this block's self-attention (double
    buffered, so A/B are symmetric and order-independent).
    """
    if position_mode not in ("full", "none", "self_only"):
        raise ValueError(f"unknown position mode {position_mode!r}")
    n, m = d_a.shape[0], d_b.shape[0]
    if n == 0 or m == 0:
        raise EmptyKeypointsError("empty keypoint set")
    p_self_a = p_a if position_mode in ("full", "self_only") else None
    p_self_b = p_b if position_mode in ("full", "self_only") else None
    p_cross_a = p_a if position_mode == "full" else None
    p_cross_b = p_b if position_mode == "full" else None

    def count(stats_attr, mask, rows, cols):
        if stats is None:
            return
        pairs = int(np.asarray(mask).sum()) if mask is not None else rows * cols
        setattr(stats, stats_attr, getattr(stats, stats_attr) + pairs)

    for block in stack.blocks:
        count("self_scored_pairs", intra_mask_a, n, n)
        count("self_scored_pairs", intra_mask_b, m, m)
        d_a = position_guided_attention(d_a, p_self_a, d_a, p_self_a, intra_mask_a, block.self_a)
        d_b = position_guided_attention(d_b, p_self_b, d_b, p_self_b, intra_mask_b, block.self_b)
        count("cross_scored_pairs", mask_b_to_a, n, m)
        count("cross_scored_pairs", mask_a_to_b, m, n)
        if stats is not None:
            stats.cross_calls += 2
        d_a_next = position_guided_attention(
            d_a, p_cross_a, d_b, p_cross_b, mask_b_to_a, block.cross_a_from_b)
        d_b_next = position_guided_attention(
            d_b, p_cross_b, d_a, p_cross_a, mask_a_to_b, block.cross_b_from_a)
        d_a, d_b = d_a_next, d_b_next
    return d_a, d_b


def propagate(pair, masks: tuple[GuidanceMask, GuidanceMask], stack: PropagationStack,
              position_mode: str = "full",
              stats: Optional[PropagationStats] = None) -> tuple[nc.Tensor, nc.Tensor]:
    """FeatureSet-level entry point; positional features must be filled."""
    fs_a, fs_b = pair
    if fs_a.positional is None or fs_b.positional is None:
        raise ValueError("positional features not computed")
    mask_b_to_a, mask_a_to_b = masks
    return run_stack(
        stack,
        nc.Tensor(np.asarray(fs_a.descriptors, dtype=np.float64)),
        nc.Tensor(np.asarray(fs_a.positional, dtype=np.float64)),
        nc.Tensor(np.asarray(fs_b.descriptors, dtype=np.float64)),
        nc.Tensor(np.asarray(fs_b.positional, dtype=np.float64)),
        mask_b_to_a.mask, mask_a_to_b.mask,
        position_mode=position_mode,
        stats=stats,
    )
