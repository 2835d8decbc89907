"""Prototype learner: Sinkhorn-Knopp optimal-transport clustering of tokens.

Tokens are grouped into K prototypes by alternating three steps:
similarity against current centers, entropic optimal-transport assignment
on the transportation polytope (rows sum to 1/K, columns to 1/N), and a
weighted-mean center update.  The soft assignment is then broadcast back
into the tokens for the adaptation heads.

Gradients flow through the unrolled Sinkhorn iterations; nothing is
stop-gradiented.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegeneracyError, NumericError, ShapeError
from .tokenizer import TokenGrid

SINKHORN_REG_DEFAULT = 0.05
SINKHORN_ITERS_DEFAULT = 100
SINKHORN_TOL_DEFAULT = 1e-6
# floor on the shifted exponent so the float64 kernel stays strictly
# positive (no 0 * inf when a column is entirely saturated away)
_EXP_FLOOR = -200.0


@dataclass
class PrototypeSet:
    """Prototype centers C (K x D), soft assignment Q (K x N)."""

    C: Tensor
    Q: Tensor
    K: int
    iters_run: int
    objectives: List[float] = field(default_factory=list)  # Tr(Q^T V) per round


@dataclass
class AssignmentVector:
    """Per-token prototype weights r_i.

    r_{i,k} = N * Q[k, i]: dividing the column by its marginal 1/N makes
    each token's weights sum to 1, so prototype mixtures are convex
    combinations.
    """

    r: np.ndarray

    @property
    def total(self) -> float:
        return float(self.r.sum())


def assignment_vector(ps: PrototypeSet, token_index: int) -> AssignmentVector:
    n = ps.Q.shape[1]
    return AssignmentVector(n * ps.Q.data[:, token_index].copy())


def lattice_indices(grid_h: int, grid_w: int, k: int) -> np.ndarray:
    """K cell indices on a regular lattice over the token grid.

    Uses a ceil(sqrt(K)) x ceil(K / ceil(sqrt(K))) lattice, mapping each
    lattice point to the nearest cell via floor((i + 0.5) * extent / rows).
    Duplicates are dropped left-to-right; if collisions leave fewer than K
    cells, remaining cells are taken in row-major order.
    """
    n = grid_h * grid_w
    if k > n:
        raise ConfigError(f"K={k} exceeds token count N={n}")
    rows = int(np.ceil(np.sqrt(k)))
    cols = int(np.ceil(k / rows))
    picked: list[int] = []
    seen: set[int] = set()
    for i in range(rows):
        r = int((i + 0.5) * grid_h // rows)
        for j in range(cols):
            c = int((j + 0.5) * grid_w // cols)
            idx = r * grid_w + c
            if idx not in seen:
                seen.add(idx)
                picked.append(idx)
    for idx in range(n):
        if len(picked) >= k:
            break
        if idx not in seen:
            seen.add(idx)
            picked.append(idx)
    return np.array(picked[:k], dtype=np.int64)


def init_prototypes(tokens: TokenGrid, k: int) -> Tensor:
    """Seed centers from token columns on a regular 2-D lattice."""
    idx = lattice_indices(tokens.grid_h, tokens.grid_w, k)
    return ad.transpose(ad.gather_cols(tokens.tokens, idx))  # (K, D)


def similarity(c: Tensor, x: Tensor) -> Tensor:
    """V[k, n] = <C_k, X_:,n>; C is (K, D), X is stored (D, N)."""
    if c.shape[1] != x.shape[0]:
        raise ShapeError(f"similarity width mismatch: C {c.shape} vs X {x.shape}")
    return ad.matmul(c, x)


def sinkhorn_assign(v: Tensor, reg: float,
                    max_iters: int = SINKHORN_ITERS_DEFAULT,
                    tol: float = SINKHORN_TOL_DEFAULT,
                    residual_log: Optional[list] = None,
                    _skip_column_scaling: bool = False) -> Tensor:
    """Entropic optimal-transport assignment via alternating scaling.

    Solves  max_Q Tr(Q^T V) - reg * sum Q log Q  subject to
    Q 1_N = (1/K) 1_K and Q^T 1_K = (1/N) 1_N, by Sinkhorn-Knopp:
    Q = diag(u) exp(V / reg) diag(v) with u, v updated alternately until
    both marginal residuals drop below ``tol`` or ``max_iters`` is hit.

    The kernel exponent is shifted by its row max before exp; the shift is
    a per-row constant absorbed exactly by u, so treating it as a constant
    keeps values and gradients exact while preventing overflow.  The last
    scaling is column-wise, so the returned Q meets the column constraint
    to rounding and the row constraint within ``tol``.

    The scaling loop runs in float64 regardless of the input dtype: with
    saturated kernels the u/v potentials reach 1e25 and their division
    gradients square that, which overflows float32.  Q is cast back to the
    input dtype on return.

    ``_skip_column_scaling`` is a test-only negative-control hook: it
    returns after the first row scaling, which leaves the column marginals
    violated so downstream marginal checks must fail.
    """
    if reg <= 0:
        raise ConfigError(f"sinkhorn reg must be positive, got {reg}")
    if not np.all(np.isfinite(v.data)):
        raise NumericError("sinkhorn similarity matrix must be finite")
    k, n = v.shape
    in_dtype = v.dtype
    v64 = ad.astype(v, np.float64) if in_dtype != np.float64 else v
    scaled = ad.scale(v64, 1.0 / reg)
    shift = Tensor(np.broadcast_to(scaled.data.max(axis=1, keepdims=True),
                                   (k, n)).copy())
    m = ad.exp(ad.clamp_min(ad.sub(scaled, shift), _EXP_FLOOR))
    if not np.all(np.isfinite(m.data)):
        raise NumericError("exp overflow in sinkhorn kernel; increase reg")
    mt = ad.transpose(m)

    r_target = 1.0 / k
    c_target = 1.0 / n
    vvec = Tensor(np.ones((n, 1), dtype=np.float64))
    u = ad.div(r_target, ad.matmul(m, vvec))
    if _skip_column_scaling:
        q = ad.scale_rows(m, u)
        return ad.astype(q, in_dtype) if in_dtype != np.float64 else q
    for it in range(max_iters):
        vvec = ad.div(c_target, ad.matmul(mt, u))
        # residuals on raw values only; the convergence test is not taped
        row = (m.data @ vvec.data) * u.data
        res = float(np.max(np.abs(row - r_target)))
        if residual_log is not None:
            residual_log.append(res)
        if res < tol or it == max_iters - 1:
            break  # the column scaling above stays the final operation
        u = ad.div(r_target, ad.matmul(m, vvec))
    q = ad.scale_cols(ad.scale_rows(m, u), vvec)
    return ad.astype(q, in_dtype) if in_dtype != np.float64 else q


def update_prototypes(q: Tensor, x: Tensor) -> Tensor:
    """Row-normalized weighted token means: C_k = sum_n Qhat[k,n] X_:,n."""
    if q.shape[1] != x.shape[1]:
        raise ShapeError(f"update shape mismatch: Q {q.shape} vs X {x.shape}")
    rowsum = ad.tsum(q, axis=1, keepdims=True)
    if np.any(rowsum.data == 0):
        raise DegeneracyError("assignment has an empty prototype row")
    qhat = ad.scale_rows(q, ad.div(1.0, rowsum))
    return ad.matmul(qhat, ad.transpose(x))


def prototype_iterate(tokens: TokenGrid, k: int, t_cluster: int,
                      reg: float = SINKHORN_REG_DEFAULT,
                      max_iters: int = SINKHORN_ITERS_DEFAULT,
                      tol: float = SINKHORN_TOL_DEFAULT) -> PrototypeSet:
    """Lattice init, then T_cluster rounds of assign / update."""
    if t_cluster < 1:
        raise ConfigError(f"T_cluster must be >= 1, got {t_cluster}")
    x = tokens.tokens
    c = init_prototypes(tokens, k)
    q = None
    objectives = []
    for _ in range(t_cluster):
        v = similarity(c, x)
        q = sinkhorn_assign(v, reg, max_iters=max_iters, tol=tol)
        objectives.append(float((q.data * v.data).sum()))
        c = update_prototypes(q, x)
    return PrototypeSet(C=c, Q=q, K=k, iters_run=t_cluster, objectives=objectives)


def prototype_context(ps: PrototypeSet) -> Tensor:
    """Per-token prototype mixture sum_k r_{n,k} C_k, shape (D, N)."""
    r = ad.scale(ps.Q, float(ps.Q.shape[1]))
    return ad.matmul(ad.transpose(ps.C), r)


def broadcast_prototypes(tokens: TokenGrid, ps: PrototypeSet,
                         proj: Tensor) -> TokenGrid:
    """Fuse prototype context back into tokens.

    Each token is concatenated with its assignment-weighted prototype
    mixture, linearly projected back to the token width, and residual-added
    to the original token.  ``proj`` has shape (D, 2D); zero weights make
    this the identity.
    """
    d = tokens.width
    if proj.shape != (d, 2 * d):
        raise ShapeError(f"broadcast proj must be ({d}, {2 * d}), got {proj.shape}")
    ctx = prototype_context(ps)
    cat = ad.concat([tokens.tokens, ctx], axis=0)
    return tokens.with_tokens(ad.add(tokens.tokens, ad.matmul(proj, cat)))
