"""Feature denoiser: subspace denoising followed by ISTA projection.

Each layer treats every token column independently.  Denoising computes,
per token z_n,

    s_k = ||U_k^T z_n||^2
    w   = softmax_k( s_k / (2 sigma^2) )
    out = sum_k w_k * U_k (U_k^T z_n)

i.e. a softmax-weighted sum of orthogonal subspace projections, and the
projection step applies one non-negative shrinkage-thresholding update
against a dictionary O:

    out = relu( z' + eps * O^T (z' - O z') )

U_k bases are learned and re-orthonormalized after every optimizer step
(projection back onto the Stiefel manifold), so the projector reading of
U_k U_k^T stays exactly valid.  sigma is stored as rho with
sigma = exp(rho) > 0; eps is fixed.  O starts near identity and is left
unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegeneracyError, ShapeError
from .tokenizer import TokenGrid

ISTA_STEP_DEFAULT = 0.1


@dataclass
class SubspaceLayerParams:
    """One denoiser layer: subspace bases, dictionary, noise level, step."""

    U: List[Tensor]              # K_h bases, each (d_in, p) with orthonormal columns
    O: Tensor                    # (d_in, d_in) sparsifying dictionary
    rho: Tensor                  # scalar log noise level; sigma = exp(rho)
    eps_step: float = ISTA_STEP_DEFAULT
    out_proj: Optional[Tensor] = None   # (d_out, d_in), present when reducing width

    @property
    def d_in(self) -> int:
        return self.U[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.d_in if self.out_proj is None else self.out_proj.shape[0]

    @property
    def subspace_dim(self) -> int:
        return self.U[0].shape[1]

    @property
    def sigma(self) -> float:
        return float(np.exp(self.rho.data))


@dataclass
class DenoiserStack:
    """Ordered denoiser layers; the final width is strictly below the input width."""

    layers: List[SubspaceLayerParams] = field(default_factory=list)

    @property
    def dims(self) -> List[int]:
        if not self.layers:
            return []
        return [self.layers[0].d_in] + [l.d_out for l in self.layers]


def orthonormalize(u_raw: Tensor) -> Tensor:
    """QR-orthonormalize columns, with signs fixed for determinism.

    Idempotent within 1e-10 on already-orthonormal input.  Rank-deficient
    input raises DegeneracyError.  Returns an untracked tensor; this is a
    parameter-maintenance step, not a differentiable op.
    """
    a = u_raw.data
    if a.ndim != 2 or a.shape[1] > a.shape[0]:
        raise ShapeError(f"orthonormalize expects tall (d, p), got {a.shape}")
    q, r = np.linalg.qr(a)
    diag = np.diag(r)
    if np.min(np.abs(diag)) <= 1e-10 * max(1.0, float(np.max(np.abs(diag)))):
        raise DegeneracyError("column-rank-deficient basis cannot be orthonormalized")
    signs = np.sign(diag)
    return Tensor((q * signs).astype(a.dtype))


def orthonormality_defect(layer: SubspaceLayerParams) -> float:
    """max_k || U_k^T U_k - I ||_max, the maintained invariant."""
    worst = 0.0
    for u in layer.U:
        gram = u.data.T @ u.data
        worst = max(worst, float(np.max(np.abs(gram - np.eye(gram.shape[0])))))
    return worst


def reorthonormalize_(layer: SubspaceLayerParams):
    """In-place re-projection of every U_k after an optimizer step."""
    for u in layer.U:
        u.data[...] = orthonormalize(u).data


def subspace_denoise(z: Tensor, layer: SubspaceLayerParams) -> Tensor:
    """Per-token softmax-weighted sum of subspace projections."""
    if z.shape[0] != layer.d_in:
        raise ShapeError(f"token width {z.shape[0]} != layer width {layer.d_in}")
    p = layer.subspace_dim
    k_h = len(layer.U)
    u_cat = ad.concat(layer.U, axis=1)              # (d, K*p)
    coef = ad.matmul(ad.transpose(u_cat), z)        # (K*p, N)
    sq = ad.mul(coef, coef)
    s = ad.tsum(ad.reshape(sq, (k_h, p, z.shape[1])), axis=1)   # (K, N)
    inv_two_sigma_sq = ad.scale(ad.exp(ad.scale(layer.rho, -2.0)), 0.5)
    w = ad.softmax(ad.mul(s, inv_two_sigma_sq), axis=0)
    weighted = ad.mul(ad.repeat_rows(w, p), coef)
    return ad.matmul(u_cat, weighted)


def ista_project(z_prime: Tensor, layer: SubspaceLayerParams) -> Tensor:
    """One non-negative ISTA step against the dictionary O."""
    if z_prime.shape[0] != layer.d_in:
        raise ShapeError(f"token width {z_prime.shape[0]} != layer width {layer.d_in}")
    resid = ad.sub(z_prime, ad.matmul(layer.O, z_prime))
    step = ad.matmul(ad.transpose(layer.O), resid)
    return ad.relu(ad.add(z_prime, ad.scale(step, layer.eps_step)))


def denoiser_forward(tokens: TokenGrid, stack: DenoiserStack) -> TokenGrid:
    """Apply every layer in order; grid geometry is preserved."""
    z = tokens.tokens
    for layer in stack.layers:
        z = subspace_denoise(z, layer)
        z = ista_project(z, layer)
        if layer.out_proj is not None:
            z = ad.matmul(layer.out_proj, z)
    return tokens.with_tokens(z)


# ---------------------------------------------------------------------------
# construction

def layer_widths(D: int, d: int, n_layers: int, head_dim: int) -> List[int]:
    """Linear width ramp D -> d, rounded to multiples of head_dim."""
    if d >= D:
        raise ConfigError(f"final width d={d} must be smaller than D={D}")
    if D % head_dim or d % head_dim:
        raise ConfigError(f"widths D={D}, d={d} must be multiples of head_dim={head_dim}")
    widths = []
    for i in range(n_layers + 1):
        w = D + (d - D) * i / n_layers
        widths.append(max(head_dim, int(round(w / head_dim)) * head_dim))
    widths[0], widths[-1] = D, d
    return widths


def init_subspace_layer(d_in: int, d_out: int, head_dim: int,
                        rng: np.random.Generator, dtype=np.float32,
                        eps_step: float = ISTA_STEP_DEFAULT) -> SubspaceLayerParams:
    if d_in % head_dim:
        raise ConfigError(f"head_dim {head_dim} must divide layer width {d_in}")
    k_h = d_in // head_dim
    bases = []
    for _ in range(k_h):
        raw = Tensor(rng.normal(size=(d_in, head_dim)).astype(dtype))
        u = orthonormalize(raw)
        u.requires_grad = True
        bases.append(u)
    o = Tensor((np.eye(d_in) + 0.01 * rng.normal(size=(d_in, d_in))).astype(dtype),
               requires_grad=True)
    rho = Tensor(np.zeros((), dtype=dtype), requires_grad=True)  # sigma = 1
    out_proj = None
    if d_out != d_in:
        bound = 1.0 / np.sqrt(d_in)
        out_proj = Tensor(rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype),
                          requires_grad=True)
    return SubspaceLayerParams(U=bases, O=o, rho=rho, eps_step=eps_step,
                               out_proj=out_proj)


def init_denoiser(D: int, d: int, n_layers: int, head_dim: int,
                  rng: np.random.Generator, dtype=np.float32) -> DenoiserStack:
    widths = layer_widths(D, d, n_layers, head_dim)
    layers = [init_subspace_layer(widths[i], widths[i + 1], head_dim, rng, dtype)
              for i in range(n_layers)]
    return DenoiserStack(layers=layers)
