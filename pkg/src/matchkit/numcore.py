"""Dense float64 tensors with a reverse-mode differentiation tape.

Deliberately small: 2-d matrices (plus vectors and scalars as degenerate
shapes), strict shape checks, no general broadcasting, no GPU. Every
primitive has an analytic backward that the test suite validates against
central finite differences.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class Tensor:
    """Immutable float64 array. NaN/Inf are rejected at construction."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _assign(self, new_data: np.ndarray) -> None:
        # Optimizer-only escape hatch: swaps the backing array (never writes
        # in place, so values already captured by a tape stay valid).
        # Training is exclusive per model instance.
        arr = np.asarray(new_data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError("parameter update changes shape")
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter update contains non-finite entries")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


BackwardFn = Callable[[np.ndarray], tuple]

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Backward replays the record in reverse; execution order is a topological
    order, so each recorded node is visited exactly once.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self._entries.append((out, inputs, backward))

    def gradients(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar output w.r.t. the given tensors."""
        if output.size != 1:
            raise DimensionError("gradients require a scalar output")
        adjoint: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for out, inputs, backward in reversed(self._entries):
            g = adjoint.get(id(out))
            if g is None:
                continue
            grads = backward(g)
            for tensor, grad in zip(inputs, grads):
                if grad is None:
                    continue
                acc = adjoint.get(id(tensor))
                adjoint[id(tensor)] = grad if acc is None else acc + grad
        return [adjoint.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite result in {op}")
    out = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(data, dtype=np.float64)
    arr.setflags(write=False)
    object.__setattr__(out, "data", arr)
    tape = active_tape()
    if tape is not None:
        tape._record(out, inputs, backward)
    return out


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.ndim == 2 and b.ndim == 2, "matmul expects matrices")
    _need(a.shape[1] == b.shape[0], f"matmul inner dims {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    _need(a.ndim == 2, "transpose expects a matrix")

    def backward(g):
        return (g.T,)

    return _make(a.data.T, (a,), backward, "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    _need(a.shape == b.shape, f"add shapes {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need(a.shape == b.shape, f"sub shapes {a.shape} vs {b.shape}")

    def backward(g):
        return g, -g

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.shape == b.shape, f"mul shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(a.data * c, (a,), backward, "scale")


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g,)

    return _make(a.data + c, (a,), backward, "shift")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0.0

    def backward(g):
        return (g * pos,)

    return _make(np.where(pos, a.data, 0.0), (a,), backward, "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive entries")
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), backward, "log")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return _make(np.asarray(a.data.sum()), (a,), backward, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with a 1-d bias broadcast over rows."""
    _need(x.ndim == 2 and w.ndim == 2 and b.ndim == 1, "affine expects (matrix, matrix, vector)")
    _need(x.shape[1] == w.shape[0], f"affine input width {x.shape[1]} != {w.shape[0]}")
    _need(w.shape[1] == b.shape[0], "affine bias width mismatch")
    xd, wd = x.data, w.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _make(xd @ wd + b.data, (x, w, b), backward, "affine")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    _need(a.ndim == 2 and b.ndim == 2 and a.shape[0] == b.shape[0], "concat_cols row mismatch")
    na = a.shape[1]

    def backward(g):
        return g[:, :na], g[:, na:]

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat_cols")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _need(a.ndim == 2, "slice_cols expects a matrix")
    _need(0 <= start < stop <= a.shape[1], f"slice [{start},{stop}) out of {a.shape[1]} cols")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), (a,), backward, "slice_cols")


def add_rows(x: Tensor, u: Tensor) -> Tensor:
    """x + u[:, None]: add a per-row offset vector."""
    _need(x.ndim == 2 and u.ndim == 1 and x.shape[0] == u.shape[0], "add_rows shape mismatch")

    def backward(g):
        return g, g.sum(axis=1)

    return _make(x.data + u.data[:, None], (x, u), backward, "add_rows")


def add_cols(x: Tensor, v: Tensor) -> Tensor:
    """x + v[None, :]: add a per-column offset vector."""
    _need(x.ndim == 2 and v.ndim == 1 and x.shape[1] == v.shape[0], "add_cols shape mismatch")

    def backward(g):
        return g, g.sum(axis=0)

    return _make(x.data + v.data[None, :], (x, v), backward, "add_cols")


def logsumexp_rows(x: Tensor) -> Tensor:
    _need(x.ndim == 2, "logsumexp_rows expects a matrix")
    xd = x.data
    mx = xd.max(axis=1, keepdims=True)
    e = np.exp(xd - mx)
    s = e.sum(axis=1, keepdims=True)
    out = (mx + np.log(s)).reshape(-1)
    soft = e / s

    def backward(g):
        return (soft * g[:, None],)

    return _make(out, (x,), backward, "logsumexp_rows")


def logsumexp_cols(x: Tensor) -> Tensor:
    _need(x.ndim == 2, "logsumexp_cols expects a matrix")
    xd = x.data
    mx = xd.max(axis=0, keepdims=True)
    e = np.exp(xd - mx)
    s = e.sum(axis=0, keepdims=True)
    out = (mx + np.log(s)).reshape(-1)
    soft = e / s

    def backward(g):
        return (soft * g[None, :],)

    return _make(out, (x,), backward, "logsumexp_cols")


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax; masked entries are exactly 0 and rows renormalize over
    the unmasked ones. Rows with no unmasked entry come back all-zero
    instead of erroring (see fully_masked_rows)."""
    _need(x.ndim == 2, "softmax_rows expects a matrix")
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        _need(m.shape == x.shape, "softmax mask shape mismatch")
    xd = x.data
    neg = np.where(m, xd, -np.inf)
    mx = neg.max(axis=1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    # exp only where unmasked; masked entries would otherwise overflow
    e = np.where(m, np.exp(np.where(m, xd, mx) - mx), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    safe = np.where(denom > 0.0, denom, 1.0)
    out = e / safe

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward, "softmax_rows")


def fully_masked_rows(mask: Optional[np.ndarray]) -> np.ndarray:
    """Boolean flags for rows with no attendable entry."""
    if mask is None:
        raise ValueError("no mask given")
    m = np.asarray(mask, dtype=bool)
    return ~m.any(axis=1)


def pad_dustbin(s: Tensor, bin_score: Tensor) -> Tensor:
    """Append one row and one column filled with a learnable scalar."""
    _need(s.ndim == 2, "pad_dustbin expects a matrix")
    _need(bin_score.size == 1, "dustbin score must be a scalar")
    n, m = s.shape
    out = np.empty((n + 1, m + 1))
    out[:n, :m] = s.data
    out[n, :] = bin_score.item()
    out[:, m] = bin_score.item()

    def backward(g):
        gd = g[n, :].sum() + g[:n, m].sum()
        return g[:n, :m].copy(), np.asarray(gd)

    return _make(out, (s, bin_score), backward, "pad_dustbin")


def take(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather x[rows[k], cols[k]] into a vector."""
    _need(x.ndim == 2, "take expects a matrix")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    _need(rows.shape == cols.shape and rows.ndim == 1, "take index shape mismatch")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(x.data[rows, cols].copy(), (x,), backward, "take")


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MLPParams:
    """Affine layers with ReLU between them (none after the last)."""

    layers: tuple[tuple[Tensor, Tensor], ...]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out


def mlp_init(widths: Sequence[int], rng: np.random.Generator, zero_last: bool = False) -> MLPParams:
    """Glorot-uniform init; zero_last zeroes the final layer (identity start)."""
    if len(widths) < 2:
        raise ValueError("mlp needs at least input and output widths")
    layers = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        if zero_last and i == len(widths) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            s = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-s, s, size=(fan_in, fan_out))
        layers.append((Tensor(w), Tensor(np.zeros(fan_out))))
    return MLPParams(layers=tuple(layers))


def mlp_apply(params: MLPParams, x: Tensor) -> Tensor:
    _need(x.ndim == 2, "mlp_apply expects a matrix input")
    _need(x.shape[1] == params.in_dim, f"mlp input width {x.shape[1]} != {params.in_dim}")
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = affine(h, w, b)
        if i != last:
            h = relu(h)
    return h
