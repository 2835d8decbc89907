"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything downstream (tokenizer, denoiser, prototype learner, heads,
losses) is expressed in the operations of this module.  Design rules:

* A ``Tensor`` wraps a numpy array (float32 for training, float64 for
  oracle checks).  Tensors are immutable once created, except for
  explicit in-place parameter updates performed by the optimizer.
* Differentiable ops append one node to the thread-local :class:`Tape`.
  Nodes are recorded in execution order, so walking the tape backwards
  visits them in reverse topological order.
* Gradients accumulate additively when a tensor feeds several ops
  (required for shared parameters).
* Broadcasting is restricted to scalar-with-tensor; shape mismatches
  raise :class:`~motionkit.errors.ShapeError` at the call site.
* ``finite_diff_check`` is the central-difference gradient oracle; it
  is deliberately independent of the backward pass it verifies.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "active_tape", "no_grad", "grad_enabled", "backward",
    "accumulate", "register_op",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose",
    "reshape", "concat", "narrow", "gather_cols", "gather_flat",
    "repeat_rows", "scale_rows", "scale_cols", "add_bias",
    "tsum", "tmean", "exp", "log", "sqrt", "sqrt0", "tabs", "relu",
    "sigmoid", "tanh", "softmax", "clamp_min", "astype",
    "finite_diff_check", "FiniteDiffReport",
]

_tls = threading.local()


class Tape:
    """Ordered record of executed differentiable operations.

    One tape is owned by exactly one execution context (thread).  The
    record order is execution order; reversed, it is a valid reverse
    topological order because every node's inputs were recorded before
    the node itself.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: "Tensor", backward: Callable[[np.ndarray], None]):
        self.out = out
        self.backward = backward


def active_tape() -> Tape:
    """Tape of the current thread (created on first use)."""
    tape = getattr(_tls, "tape", None)
    if tape is None:
        tape = Tape()
        _tls.tape = tape
    return tape


def grad_enabled() -> bool:
    return getattr(_tls, "no_grad_depth", 0) == 0


@contextmanager
def no_grad():
    """Suppress tape recording; forward passes run value-only."""
    _tls.no_grad_depth = getattr(_tls, "no_grad_depth", 0) + 1
    try:
        yield
    finally:
        _tls.no_grad_depth -= 1


class Tensor:
    """Dense multi-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"grad={self.requires_grad})")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _result(data: np.ndarray, track: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = track
    out.is_leaf = not track
    return out


def register_op(data: np.ndarray, parents: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Build an op output and record it on the active tape.

    ``backward_fn(g)`` must push gradients into the parents via
    :func:`accumulate`.  This is the extension point for fused ops
    defined outside this module (correlation lookup, convex upsampling).
    """
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = _result(data, track)
    if track:
        active_tape().nodes.append(_Node(out, backward_fn))
    return out


def accumulate(t: Tensor, g: np.ndarray):
    """Add ``g`` into ``t.grad``; logs leaf recipients for backward()."""
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g
    if t.is_leaf:
        log = getattr(_tls, "leaf_log", None)
        if log is None:
            log = []
            _tls.leaf_log = log
        log.append(t)


def backward(loss: Tensor) -> list[Tensor]:
    """Reverse sweep from a scalar loss; returns leaves that got gradients.

    The active tape is cleared afterwards.  A scalar with no tracked
    ancestors yields an empty gradient set.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if not loss.requires_grad:
        tape.clear()
        return []
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue  # not on a path to the loss
        node.backward(g)
        if not node.out.is_leaf:
            node.out.grad = None  # free intermediate grads eagerly
    tape.clear()
    leaves: list[Tensor] = []
    seen: set[int] = set()
    log = getattr(_tls, "leaf_log", None)
    if log:
        for t in log:
            if id(t) not in seen:
                seen.add(id(t))
                leaves.append(t)
        log.clear()
    return leaves


# ---------------------------------------------------------------------------
# helpers

def _as_scalar(x, dtype):
    return dtype.type(x)


def _binary_operands(a, b):
    """Normalize operands of an elementwise binary op.

    Returns (a_tensor_or_None, b_tensor_or_None, a_data, b_data, out_track).
    Python numbers stay raw; size-1 tensors count as scalars against any
    shape; otherwise shapes must match exactly.
    """
    ta = isinstance(a, Tensor)
    tb = isinstance(b, Tensor)
    if not ta and not tb:
        raise ContractError("elementwise op needs at least one Tensor operand")
    ad = a.data if ta else None
    bd = b.data if tb else None
    if ta and tb and a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return (a if ta else None), (b if tb else None), ad, bd


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (scalar operand side of a broadcast)."""
    if g.shape == shape:
        return g
    return g.sum().reshape(shape) if shape else np.asarray(g.sum())


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    ta, tb, ad, bd = _binary_operands(a, b)
    out = ad + bd if tb is not None and ta is not None else (
        ad + _as_scalar(b, ad.dtype) if ta is not None else bd + _as_scalar(a, bd.dtype))
    parents = [t for t in (ta, tb) if t is not None]

    def bwd(g):
        if ta is not None:
            accumulate(ta, _reduce_to(g, ta.shape))
        if tb is not None:
            accumulate(tb, _reduce_to(g, tb.shape))

    return register_op(out, parents, bwd)


def sub(a, b) -> Tensor:
    ta, tb, ad, bd = _binary_operands(a, b)
    out = ad - bd if tb is not None and ta is not None else (
        ad - _as_scalar(b, ad.dtype) if ta is not None else _as_scalar(a, bd.dtype) - bd)
    parents = [t for t in (ta, tb) if t is not None]

    def bwd(g):
        if ta is not None:
            accumulate(ta, _reduce_to(g, ta.shape))
        if tb is not None:
            accumulate(tb, _reduce_to(-g, tb.shape))

    return register_op(out, parents, bwd)


def mul(a, b) -> Tensor:
    ta, tb, ad, bd = _binary_operands(a, b)
    if ta is not None and tb is not None:
        out = ad * bd
    elif ta is not None:
        out = ad * _as_scalar(b, ad.dtype)
    else:
        out = bd * _as_scalar(a, bd.dtype)
    parents = [t for t in (ta, tb) if t is not None]

    def bwd(g):
        if ta is not None:
            other = bd if tb is not None else _as_scalar(b, ad.dtype)
            accumulate(ta, _reduce_to(g * other, ta.shape))
        if tb is not None:
            other = ad if ta is not None else _as_scalar(a, bd.dtype)
            accumulate(tb, _reduce_to(g * other, tb.shape))

    return register_op(out, parents, bwd)


def div(a, b) -> Tensor:
    ta, tb, ad, bd = _binary_operands(a, b)
    if tb is not None and not np.all(bd != 0):
        raise NumericError("division by zero")
    if ta is not None and tb is not None:
        out = ad / bd
    elif ta is not None:
        s = _as_scalar(b, ad.dtype)
        if s == 0:
            raise NumericError("division by zero")
        out = ad / s
    else:
        out = _as_scalar(a, bd.dtype) / bd
    parents = [t for t in (ta, tb) if t is not None]

    def bwd(g):
        if ta is not None:
            denom = bd if tb is not None else _as_scalar(b, ad.dtype)
            accumulate(ta, _reduce_to(g / denom, ta.shape))
        if tb is not None:
            num = ad if ta is not None else _as_scalar(a, bd.dtype)
            accumulate(tb, _reduce_to(-g * num / (bd * bd), tb.shape))

    return register_op(out, parents, bwd)


def neg(x: Tensor) -> Tensor:
    def bwd(g):
        accumulate(x, -g)

    return register_op(-x.data, [x], bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (kept separate from mul for hot paths)."""
    cc = x.data.dtype.type(c)

    def bwd(g):
        accumulate(x, g * cc)

    return register_op(x.data * cc, [x], bwd)


# ---------------------------------------------------------------------------
# linear algebra / structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g @ bd.T)
        if b.requires_grad:
            accumulate(b, ad.T @ g)

    return register_op(ad @ bd, [a, b], bwd)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        inv = None
        out = x.data.T
    else:
        inv = np.argsort(axes)
        out = np.transpose(x.data, axes)

    def bwd(g):
        accumulate(x, g.T if inv is None else np.transpose(g, inv))

    return register_op(np.ascontiguousarray(out), [x], bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def bwd(g):
        accumulate(x, g.reshape(old))

    return register_op(x.data.reshape(shape), [x], bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate(t, piece)

    return register_op(np.concatenate(datas, axis=axis), list(tensors), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        accumulate(x, full)

    return register_op(np.ascontiguousarray(x.data[idx]), [x], bwd)


def gather_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select columns of a 2-D tensor; duplicate indices are supported."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_cols needs a 2-D tensor, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None), idx), g)
        accumulate(x, full)

    return register_op(x.data[:, idx], [x], bwd)


def gather_flat(x: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Gather elements of the flattened tensor into a vector."""
    flat_idx = np.asarray(flat_idx, dtype=np.int64)

    def bwd(g):
        full = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(full, flat_idx, g)
        accumulate(x, full.reshape(x.data.shape))

    return register_op(x.data.reshape(-1)[flat_idx], [x], bwd)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each row k times (axis 0), e.g. (K, N) -> (K*k, N)."""
    m = x.data.shape[0]

    def bwd(g):
        accumulate(x, g.reshape(m, k, *x.data.shape[1:]).sum(axis=1))

    return register_op(np.repeat(x.data, k, axis=0), [x], bwd)


def scale_rows(a: Tensor, r: Tensor) -> Tensor:
    """Row-wise rescale: out[i, :] = a[i, :] * r[i, 0]."""
    if a.data.ndim != 2 or r.shape != (a.shape[0], 1):
        raise ShapeError(f"scale_rows: {a.shape} vs {r.shape}")
    ad, rd = a.data, r.data

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g * rd)
        if r.requires_grad:
            accumulate(r, (g * ad).sum(axis=1, keepdims=True))

    return register_op(ad * rd, [a, r], bwd)


def scale_cols(a: Tensor, c: Tensor) -> Tensor:
    """Column-wise rescale: out[:, j] = a[:, j] * c[j, 0]."""
    if a.data.ndim != 2 or c.shape != (a.shape[1], 1):
        raise ShapeError(f"scale_cols: {a.shape} vs {c.shape}")
    ad = a.data
    cd = c.data.reshape(1, -1)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g * cd)
        if c.requires_grad:
            accumulate(c, (g * ad).sum(axis=0).reshape(-1, 1))

    return register_op(ad * cd, [a, c], bwd)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a per-row bias vector: (C, N) + (C, 1)."""
    if a.data.ndim != 2 or b.shape != (a.shape[0], 1):
        raise ShapeError(f"add_bias: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g)
        if b.requires_grad:
            accumulate(b, g.sum(axis=1, keepdims=True))

    return register_op(a.data + b.data, [a, b], bwd)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.data.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.data.shape))

    def bwd(g):
        accumulate(x, np.broadcast_to(g.reshape(kept), x.data.shape))

    return register_op(x.data.sum(axis=axes, keepdims=keepdims), [x], bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.data.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.data.shape))
    count = 1
    for ax in axes:
        count *= x.data.shape[ax]
    inv = x.data.dtype.type(1.0 / count)

    def bwd(g):
        accumulate(x, np.broadcast_to(g.reshape(kept) * inv, x.data.shape))

    return register_op(x.data.mean(axis=axes, keepdims=keepdims), [x], bwd)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        accumulate(x, g * out)

    return register_op(out, [x], bwd)


def log(x: Tensor) -> Tensor:
    if not np.all(x.data > 0):
        raise DomainError("log requires strictly positive input")

    def bwd(g):
        accumulate(x, g / x.data)

    return register_op(np.log(x.data), [x], bwd)


def sqrt(x: Tensor) -> Tensor:
    if not np.all(x.data > 0):
        raise DomainError("sqrt requires strictly positive input")
    out = np.sqrt(x.data)

    def bwd(g):
        accumulate(x, g * (0.5 / out))

    return register_op(out, [x], bwd)


def sqrt0(x: Tensor) -> Tensor:
    """sqrt with relaxed domain: defined at 0 with subgradient 0.

    Needed by losses whose argument is a variance-style quantity that is
    exactly zero for a perfect prediction.
    """
    xd = np.maximum(x.data, 0)
    out = np.sqrt(xd)

    def bwd(g):
        safe = np.where(xd > 0, out, 1.0)
        accumulate(x, g * np.where(xd > 0, 0.5 / safe, 0.0))

    return register_op(out, [x], bwd)


def astype(x: Tensor, dtype) -> Tensor:
    """Cast values; the gradient is cast back to the input dtype."""
    dtype = np.dtype(dtype)

    def bwd(g):
        accumulate(x, g.astype(x.data.dtype))

    return register_op(x.data.astype(dtype), [x], bwd)


def clamp_min(x: Tensor, c: float) -> Tensor:
    """max(x, c); gradient passes only where x > c."""
    cc = x.data.dtype.type(c)
    mask = x.data > cc

    def bwd(g):
        accumulate(x, g * mask)

    return register_op(np.where(mask, x.data, cc), [x], bwd)


def tabs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def bwd(g):
        accumulate(x, g * sign)

    return register_op(np.abs(x.data), [x], bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        accumulate(x, g * mask)

    return register_op(np.where(mask, x.data, 0), [x], bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        accumulate(x, g * out * (1.0 - out))

    return register_op(out, [x], bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        accumulate(x, g * (1.0 - out * out))

    return register_op(out, [x], bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis`` (max is subtracted before exp).

    The subtracted max is a constant shift per slice; softmax is invariant
    under it, so treating it as non-differentiable is exact.
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input must be finite")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        accumulate(x, out * (g - dot))

    return register_op(out, [x], bwd)


# ---------------------------------------------------------------------------
# gradient oracle

@dataclass
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst_index: tuple


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-4, tol: float = 1e-4,
                      max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> FiniteDiffReport:
    """Compare backward() against central finite differences.

    ``f`` must be a deterministic scalar function of ``x``; evaluations
    run in 64-bit (a contract error otherwise, since 32-bit differences
    cannot resolve the default step).  Relative error per coordinate uses
    denominator max(|analytic|, |numeric|, 1e-8).  When ``max_coords`` is
    given, a random subset of coordinates is probed (for large tensors).
    The report carries failures; this function never raises on mismatch.
    """
    if x.dtype != np.float64:
        raise ContractError("finite_diff_check requires a float64 tensor")
    prev = getattr(_tls, "tape", None)
    _tls.tape = Tape()
    try:
        x.requires_grad = True
        x.zero_grad()
        y = f(x)
        if y.size != 1:
            raise ContractError(f"finite_diff_check needs a scalar f, got {y.shape}")
        backward(y)
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()
        x.zero_grad()

        n = x.data.size
        coords = np.arange(n)
        if max_coords is not None and max_coords < n:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords, replace=False)

        flat = x.data.reshape(-1)
        max_rel = 0.0
        worst = 0
        with no_grad():
            for i in coords:
                keep = flat[i]
                flat[i] = keep + h
                fp = float(f(x).data)
                flat[i] = keep - h
                fm = float(f(x).data)
                flat[i] = keep
                numeric = (fp - fm) / (2.0 * h)
                denom = max(abs(numeric), abs(analytic[i]), 1e-8)
                rel = abs(numeric - analytic[i]) / denom
                if rel > max_rel:
                    max_rel, worst = rel, int(i)
        return FiniteDiffReport(
            max_rel_err=max_rel,
            passed=max_rel <= tol,
            n_checked=len(coords),
            worst_index=np.unravel_index(worst, x.data.shape),
        )
    finally:
        _tls.tape = prev if prev is not None else Tape()
