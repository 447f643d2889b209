"""Final assignment: descriptor similarity, log-domain Sinkhorn with
dustbins, and discrete mutual-argmax match extraction.

The score matrix gets one extra row and column filled with a learnable
dustbin score; the augmented marginals are [1,...,1,M] / [1,...,1,N], so
unmatched keypoints can park their mass in the dustbin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numcore as nc

DEFAULT_SINKHORN_ITERS = 100
DEFAULT_MIN_CONFIDENCE = 0.2


@dataclass
class AssignmentMatrix:
    """Soft assignment with dustbins. First N rows and first M columns each
    sum to 1; the dustbin row/column absorb the rest."""

    probs: np.ndarray  # (N+1) x (M+1)
    iterations_run: int
    log_probs: Optional[nc.Tensor] = None  # kept when differentiability is needed

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[0] - 1, self.probs.shape[1] - 1


@dataclass
class MatchList:
    pairs: list[tuple[int, int, float]]  # (i, j, confidence)
    threshold: float

    def __len__(self) -> int:
        return len(self.pairs)

    def indices(self) -> np.ndarray:
        if not self.pairs:
            return np.zeros((0, 2), dtype=np.intp)
        return np.asarray([(i, j) for i, j, _ in self.pairs], dtype=np.intp)


def similarity(d_a: nc.Tensor, d_b: nc.Tensor) -> nc.Tensor:
    """Pairwise dot products of refined descriptors."""
    return nc.matmul(d_a, nc.transpose(d_b))


def sinkhorn(scores: nc.Tensor, dustbin: nc.Tensor, iters: int = DEFAULT_SINKHORN_ITERS,
             temperature: float = 1.0) -> AssignmentMatrix:
    """Log-domain Sinkhorn on the dustbin-augmented score matrix.

    Differentiable through all iterations; overflow-safe for any finite
    input. Returns probabilities scaled so that non-dustbin rows/columns
    each sum to 1.
    """
    if iters < 1:
        raise ValueError("need at least one iteration")
    n, m = scores.shape
    aug = nc.pad_dustbin(scores, dustbin)
    if temperature != 1.0:
        aug = nc.scale(aug, 1.0 / float(temperature))
    total = n + m
    log_mu = nc.Tensor(np.log(np.concatenate([np.ones(n), [float(m)]])) - math.log(total))
    log_nu = nc.Tensor(np.log(np.concatenate([np.ones(m), [float(n)]])) - math.log(total))
    u = nc.Tensor(np.zeros(n + 1))
    v = nc.Tensor(np.zeros(m + 1))
    for _ in range(iters):
        u = nc.sub(log_mu, nc.logsumexp_rows(nc.add_cols(aug, v)))
        v = nc.sub(log_nu, nc.logsumexp_cols(nc.add_rows(aug, u)))
    log_plan = nc.add_cols(nc.add_rows(aug, u), v)
    log_probs = nc.shift(log_plan, math.log(total))
    return AssignmentMatrix(
        probs=np.exp(log_probs.data),
        iterations_run=iters,
        log_probs=log_probs,
    )


def extract_matches(assign: AssignmentMatrix,
                    min_confidence: float = DEFAULT_MIN_CONFIDENCE) -> MatchList:
    """(i, j) kept iff they are mutual argmaxes of the non-dustbin block and
    confident enough. Output is one-to-one by construction."""
    n, m = assign.shape
    pairs: list[tuple[int, int, float]] = []
    if n and m:
        block = assign.probs[:n, :m]
        best_j = block.argmax(axis=1)
        best_i = block.argmax(axis=0)
        for i in range(n):
            j = int(best_j[i])
            conf = float(block[i, j])
            if int(best_i[j]) == i and conf >= min_confidence:
                pairs.append((i, int(j), conf))
    return MatchList(pairs=pairs, threshold=min_confidence)


def mutual_nearest_matches(descriptors_a: np.ndarray,
                           descriptors_b: np.ndarray) -> MatchList:
    """MNN reference baseline on raw descriptors (dot-product similarity)."""
    a = np.asarray(descriptors_a, dtype=np.float64)
    b = np.asarray(descriptors_b, dtype=np.float64)
    pairs: list[tuple[int, int, float]] = []
    if a.shape[0] and b.shape[0]:
        sim = a @ b.T
        best_j = sim.argmax(axis=1)
        best_i = sim.argmax(axis=0)
        for i in range(a.shape[0]):
            j = int(best_j[i])
            if int(best_i[j]) == i:
                pairs.append((i, j, float(sim[i, j])))
    return MatchList(pairs=pairs, threshold=0.0)


def match_list_to_json(matches: MatchList, locations_a: np.ndarray,
                       locations_b: np.ndarray) -> list[dict]:
    out = []
    for i, j, conf in matches.pairs:
        out.append({
            "i": int(i),
            "j": int(j),
            "xy_a": [float(locations_a[i, 0]), float(locations_a[i, 1])],
            "xy_b": [float(locations_b[j, 0]), float(locations_b[j, 1])],
            "conf": conf,
        })
    return out
