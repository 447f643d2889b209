"""Whole-matcher assembly: configuration, parameter init, the OGCK
checkpoint format, and the end-to-end pair matching pipeline
(positional encoding -> guidance masks -> propagation -> assignment).

OGCK v1 layout (little-endian):
    magic "OGCK", u32 version = 1
    u32 x 6: C, C', num_blocks, num_heads, num_frequencies, n_arrays
    u8 x 4: entangled_baseline, position_mode (0 full / 1 none / 2 self_only),
            guide_intra, has_optimizer_state
    f64 x 3: keep_ratio, temperature, min_confidence
    u32: sinkhorn_iterations
    n_arrays parameter arrays, each: u32 ndim, u32 dims[ndim], f64 data.
    Parameter order: positional-encoder MLP (w, b per layer), then per block
    [self_a, self_b, cross_a_from_b, cross_b_from_a] each as
    (w_q, b_q, w_k, b_k, w_v, b_v, out-mlp w/b per layer), dustbin last.
    If has_optimizer_state: u64 step count, then first/second moment arrays
    (raw f64, shapes matching the parameter arrays in order).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import numcore as nc
from .encoder import PositionalEncoderParams, encode_positions, init_encoder
from .features import FeatureSet, normalize_channels
from .guidance import GuidanceMask, build_inter_masks, build_intra_mask
from .matching import (AssignmentMatrix, MatchList, extract_matches, similarity,
                       sinkhorn)
from .propagation import (EmptyKeypointsError, PropagationStack, PropagationStats,
                          init_stack, run_stack)

CKPT_MAGIC = b"OGCK"
CKPT_VERSION = 1

_POSITION_MODES = ("full", "none", "self_only")


class ConfigMismatchError(ValueError):
    pass


@dataclass
class MatcherConfig:
    descriptor_dim: int = 64
    guidance_dim: int = 32
    num_blocks: int = 3
    num_heads: int = 4
    num_frequencies: int = 16
    keep_ratio: float = 0.5
    entangled_baseline: bool = False
    position_mode: str = "full"
    guide_intra: bool = False
    sinkhorn_iterations: int = 100
    temperature: float = 1.0
    min_confidence: float = 0.2

    def validate(self) -> None:
        if not (0.0 < self.keep_ratio <= 1.0):
            raise ValueError(f"keep_ratio: {self.keep_ratio} outside (0, 1]")
        if self.position_mode not in _POSITION_MODES:
            raise ValueError(f"position_mode: {self.position_mode!r} not in {_POSITION_MODES}")
        if self.descriptor_dim % self.num_heads != 0:
            raise ValueError("descriptor_dim: must be divisible by num_heads")
        if self.num_blocks < 1:
            raise ValueError("num_blocks: must be >= 1")
        if self.sinkhorn_iterations < 1:
            raise ValueError("sinkhorn_iterations: must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature: must be positive")


@dataclass
class MatcherModel:
    config: MatcherConfig
    encoder: PositionalEncoderParams
    stack: PropagationStack
    dustbin: nc.Tensor

    def parameters(self) -> list[nc.Tensor]:
        return self.encoder.parameters() + self.stack.parameters() + [self.dustbin]


def init_model(config: MatcherConfig, seed: int = 0) -> MatcherModel:
    config.validate()
    rng = np.random.default_rng(seed)
    encoder = init_encoder(config.num_frequencies, config.descriptor_dim, rng)
    stack = init_stack(config.descriptor_dim, config.num_blocks, config.num_heads, rng)
    return MatcherModel(config=config, encoder=encoder, stack=stack,
                        dustbin=nc.Tensor(1.0))


# ---------------------------------------------------------------------------
# forward pipeline


def _check_features(model: MatcherModel, fs: FeatureSet, side: str) -> None:
    if fs.num_keypoints == 0:
        raise EmptyKeypointsError("empty keypoint set")
    c = model.config.descriptor_dim
    if fs.descriptor_dim != c:
        raise ConfigMismatchError(
            f"descriptor dim {fs.descriptor_dim} of side {side} != checkpoint dim {c}")
    if fs.guidance_dim != model.config.guidance_dim:
        raise ConfigMismatchError(
            f"guidance dim {fs.guidance_dim} of side {side} != "
            f"checkpoint dim {model.config.guidance_dim}")


def build_masks(model: MatcherModel, fs_a: FeatureSet, fs_b: FeatureSet,
                keep_ratio: Optional[float] = None) -> tuple[GuidanceMask, GuidanceMask]:
    ratio = model.config.keep_ratio if keep_ratio is None else keep_ratio
    g_a = normalize_channels(np.asarray(fs_a.guidance, dtype=np.float64))
    g_b = normalize_channels(np.asarray(fs_b.guidance, dtype=np.float64))
    return build_inter_masks(g_a, g_b, ratio)


def forward_pair(model: MatcherModel, fs_a: FeatureSet, fs_b: FeatureSet,
                 keep_ratio: Optional[float] = None,
                 stats: Optional[PropagationStats] = None) -> AssignmentMatrix:
    """Full differentiable forward pass to the assignment matrix."""
    cfg = model.config
    _check_features(model, fs_a, "a")
    _check_features(model, fs_b, "b")
    d_a = nc.Tensor(np.asarray(fs_a.descriptors, dtype=np.float64))
    d_b = nc.Tensor(np.asarray(fs_b.descriptors, dtype=np.float64))
    p_a = encode_positions(fs_a.locations, fs_a.image_size, model.encoder)
    p_b = encode_positions(fs_b.locations, fs_b.image_size, model.encoder)

    mask_b_to_a, mask_a_to_b = build_masks(model, fs_a, fs_b, keep_ratio)
    intra_a = intra_b = None
    if cfg.guide_intra:
        ratio = cfg.keep_ratio if keep_ratio is None else keep_ratio
        intra_a = build_intra_mask(
            normalize_channels(np.asarray(fs_a.guidance, dtype=np.float64)), ratio).mask
        intra_b = build_intra_mask(
            normalize_channels(np.asarray(fs_b.guidance, dtype=np.float64)), ratio).mask

    if cfg.entangled_baseline:
        # SuperGlue-style representation f = d + p carried through all layers
        d_a, d_b = nc.add(d_a, p_a), nc.add(d_b, p_b)
        p_a = p_b = None
        position_mode = "none"
    else:
        position_mode = cfg.position_mode

    d_a, d_b = run_stack(model.stack, d_a, p_a, d_b, p_b,
                         mask_b_to_a.mask, mask_a_to_b.mask,
                         position_mode=position_mode,
                         intra_mask_a=intra_a, intra_mask_b=intra_b,
                         stats=stats)
    scores = similarity(d_a, d_b)
    return sinkhorn(scores, model.dustbin, iters=cfg.sinkhorn_iterations,
                    temperature=cfg.temperature)


def match_pair(model: MatcherModel, fs_a: FeatureSet, fs_b: FeatureSet,
               min_confidence: Optional[float] = None,
               keep_ratio: Optional[float] = None,
               stats: Optional[PropagationStats] = None
               ) -> tuple[MatchList, AssignmentMatrix]:
    assign = forward_pair(model, fs_a, fs_b, keep_ratio=keep_ratio, stats=stats)
    threshold = model.config.min_confidence if min_confidence is None else min_confidence
    return extract_matches(assign, threshold), assign


# ---------------------------------------------------------------------------
# checkpoint io


@dataclass
class OptimizerState:
    step: int
    first_moments: list[np.ndarray] = field(default_factory=list)
    second_moments: list[np.ndarray] = field(default_factory=list)


def _write_array(f, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_array(blob: bytes, offset: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims)
    offset += 8 * count
    return arr.copy(), offset


def save_checkpoint(model: MatcherModel, path,
                    optimizer_state: Optional[OptimizerState] = None) -> None:
    cfg = model.config
    params = model.parameters()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<6I", cfg.descriptor_dim, cfg.guidance_dim, cfg.num_blocks,
                            cfg.num_heads, cfg.num_frequencies, len(params)))
        f.write(struct.pack("<4B", int(cfg.entangled_baseline),
                            _POSITION_MODES.index(cfg.position_mode),
                            int(cfg.guide_intra), int(optimizer_state is not None)))
        f.write(struct.pack("<3d", cfg.keep_ratio, cfg.temperature, cfg.min_confidence))
        f.write(struct.pack("<I", cfg.sinkhorn_iterations))
        for p in params:
            _write_array(f, p.data)
        if optimizer_state is not None:
            f.write(struct.pack("<Q", optimizer_state.step))
            for m in optimizer_state.first_moments:
                _write_array(f, m)
            for v in optimizer_state.second_moments:
                _write_array(f, v)


def load_checkpoint(path) -> tuple[MatcherModel, Optional[OptimizerState]]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    c, cp, blocks, heads, freqs, n_arrays = struct.unpack_from("<6I", blob, 8)
    entangled, pos_mode, guide_intra, has_opt = struct.unpack_from("<4B", blob, 32)
    keep_ratio, temperature, min_confidence = struct.unpack_from("<3d", blob, 36)
    (sinkhorn_iters,) = struct.unpack_from("<I", blob, 60)
    config = MatcherConfig(
        descriptor_dim=c, guidance_dim=cp, num_blocks=blocks, num_heads=heads,
        num_frequencies=freqs, keep_ratio=keep_ratio,
        entangled_baseline=bool(entangled), position_mode=_POSITION_MODES[pos_mode],
        guide_intra=bool(guide_intra), sinkhorn_iterations=sinkhorn_iters,
        temperature=temperature, min_confidence=min_confidence)
    model = init_model(config, seed=0)
    params = model.parameters()
    if len(params) != n_arrays:
        raise ValueError(f"checkpoint holds {n_arrays} arrays, model needs {len(params)}")
    offset = 64
    for p in params:
        arr, offset = _read_array(blob, offset)
        if arr.shape != p.shape:
            raise ValueError(f"checkpoint array shape {arr.shape} != expected {p.shape}")
        p._assign(arr)
    opt_state = None
    if has_opt:
        (step,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        first, second = [], []
        for _ in range(n_arrays):
            arr, offset = _read_array(blob, offset)
            first.append(arr)
        for _ in range(n_arrays):
            arr, offset = _read_array(blob, offset)
            second.append(arr)
        opt_state = OptimizerState(step=step, first_moments=first, second_moments=second)
    if offset != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return model, opt_state


def clone_model(model: MatcherModel) -> MatcherModel:
    """Deep copy (fresh parameter tensors, same values)."""
    twin = init_model(replace(model.config), seed=0)
    for dst, src in zip(twin.parameters(), model.parameters()):
        dst._assign(src.data)
    return twin
