"""Iterative adaptation heads for flow and depth.

Both heads follow the same recipe: a gated recurrent cell consumes
per-cell features and emits a residual update to a coarse estimate plus
a convex upsampling mask; the coarse estimate accumulates residuals over
T_dec steps and every intermediate estimate is upsampled to pixels.

The flow head matches two frames through an all-pairs correlation
pyramid with windowed bilinear lookup (radius 3, 3 levels); the depth
head is single-frame and keeps its coarse state in log-depth, so outputs
are strictly positive by construction.

Cells are processed pointwise: the recurrent cell sees one token column
at a time (spatial context enters through the tokens themselves and the
correlation window).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, accumulate, grad_enabled, register_op
from .errors import ContractError, ShapeError
from .tokenizer import TokenGrid

CORR_LEVELS_DEFAULT = 3
LOOKUP_RADIUS_DEFAULT = 3


@dataclass
class FlowField:
    """Dense pixel displacements with a validity mask."""

    u: Tensor           # (H, W), x displacement in pixels
    v: Tensor           # (H, W), y displacement in pixels
    valid: np.ndarray   # (H, W) bool

    @property
    def shape(self):
        return self.u.shape


@dataclass
class DepthMap:
    """Dense positive depth with a validity mask."""

    d: Tensor           # (H, W), scene units, > 0 where valid
    valid: np.ndarray

    @property
    def shape(self):
        return self.d.shape


@dataclass
class HeadState:
    """Recurrent head state: hidden features plus the coarse estimate."""

    hidden: Tensor      # (C_h, N)
    coarse: Tensor      # (2, N) flow or (1, N) log-depth, token resolution
    step: int
    t_max: int


@dataclass
class CorrelationVolume:
    """All-pairs token correlations plus average-pooled coarser levels."""

    levels: List[Tensor]    # levels[l] has shape (N1, h_l, w_l)
    grid_h: int
    grid_w: int

    @property
    def corr(self) -> Tensor:
        return self.levels[0]


def correlation_volume(feat1: TokenGrid, feat2: TokenGrid,
                       n_levels: int = CORR_LEVELS_DEFAULT) -> CorrelationVolume:
    """corr[a, b] = <f1_a, f2_b> / sqrt(D) with 2x average-pooled levels.

    Pooling halves the frame-2 grid while both extents stay even; once an
    extent turns odd or reaches 1 the level is carried over unchanged.
    """
    if (feat1.grid_h, feat1.grid_w) != (feat2.grid_h, feat2.grid_w):
        raise ShapeError(
            f"correlation grids differ: {feat1.grid_h}x{feat1.grid_w} vs "
            f"{feat2.grid_h}x{feat2.grid_w}")
    if feat1.width != feat2.width:
        raise ShapeError(f"token widths differ: {feat1.width} vs {feat2.width}")
    gh, gw = feat1.grid_h, feat1.grid_w
    n = gh * gw
    flat = ad.scale(ad.matmul(ad.transpose(feat1.tokens), feat2.tokens),
                    1.0 / np.sqrt(feat1.width))
    levels = [ad.reshape(flat, (n, gh, gw))]
    h, w = gh, gw
    for _ in range(n_levels - 1):
        if h % 2 == 0 and w % 2 == 0 and h > 1 and w > 1:
            pooled = ad.tmean(
                ad.reshape(levels[-1], (n, h // 2, 2, w // 2, 2)), axis=(2, 4))
            levels.append(pooled)
            h, w = h // 2, w // 2
        else:
            levels.append(levels[-1])
    return CorrelationVolume(levels=levels, grid_h=gh, grid_w=gw)


def _window_offsets(radius: int, dtype):
    side = 2 * radius + 1
    d = np.arange(-radius, radius + 1, dtype=dtype)
    dy = np.repeat(d, side)
    dx = np.tile(d, side)
    return dx, dy


def lookup(vol: CorrelationVolume, flow_coarse: Tensor,
           radius: int = LOOKUP_RADIUS_DEFAULT) -> Tensor:
    """Sample correlation windows around each cell's displaced position.

    For source cell (i, j) the current target is (j + u, i + v) in level-0
    cell units; at level l the position is divided by 2^l and a
    (2r+1)^2 window is read with bilinear interpolation.  Out-of-bounds
    samples read 0.  Output is (levels * (2r+1)^2, N), level-major, rows
    within a level ordered by (dy, dx).

    Differentiable in both the correlation levels and the flow.
    """
    if radius < 1:
        raise ContractError(f"lookup radius must be >= 1, got {radius}")
    gh, gw = vol.grid_h, vol.grid_w
    n = gh * gw
    if flow_coarse.shape != (2, gh, gw):
        raise ShapeError(f"flow must be (2, {gh}, {gw}), got {flow_coarse.shape}")
    dtype = flow_coarse.dtype
    side = 2 * radius + 1
    win = side * side
    dx, dy = _window_offsets(radius, dtype)

    base_x = np.tile(np.arange(gw, dtype=dtype), gh)
    base_y = np.repeat(np.arange(gh, dtype=dtype), gw)
    fx_flat = flow_coarse.data.reshape(2, n)
    tx = base_x + fx_flat[0]
    ty = base_y + fx_flat[1]
    nn = np.arange(n)[:, None]

    def corners(level_shape, px, py):
        """Corner indices, masked weights, and values for bilinear sampling."""
        h, w = level_shape
        qx = px[:, None] + dx[None, :]
        qy = py[:, None] + dy[None, :]
        x0 = np.floor(qx)
        y0 = np.floor(qy)
        fx = qx - x0
        fy = qy - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        out = []
        for ax, ay, wgt in (
            (x0, y0, (1 - fx) * (1 - fy)),
            (x0 + 1, y0, fx * (1 - fy)),
            (x0, y0 + 1, (1 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ):
            valid = (ax >= 0) & (ax < w) & (ay >= 0) & (ay < h)
            out.append((np.clip(ax, 0, w - 1), np.clip(ay, 0, h - 1),
                        wgt * valid, valid))
        return out, fx, fy

    level_datas = [lv.data for lv in vol.levels]
    track = grad_enabled() and (flow_coarse.requires_grad
                                or any(lv.requires_grad for lv in vol.levels))
    saved = []  # forward work reused by the backward closure
    pieces = []
    for li, ld in enumerate(level_datas):
        s = dtype.type(1.0 / (2 ** li))
        cs, fx, fy = corners(ld.shape[1:], tx * s, ty * s)
        acc = np.zeros((n, win), dtype=dtype)
        vals = []
        for xc, yc, wgt, valid in cs:
            val = valid * ld[nn, yc, xc]
            vals.append(val)
            acc += wgt * val
        pieces.append(acc)
        if track:
            saved.append((cs, fx, fy, vals))
    out_data = np.ascontiguousarray(
        np.concatenate(pieces, axis=1).T)  # (levels*win, N)

    parents = list(vol.levels) + [flow_coarse]

    def bwd(g):
        gt = g.T  # (N, levels*win)
        gflow_x = np.zeros(n, dtype=dtype)
        gflow_y = np.zeros(n, dtype=dtype)
        for li, lv in enumerate(vol.levels):
            s = dtype.type(1.0 / (2 ** li))
            gl = gt[:, li * win:(li + 1) * win]
            cs, fx, fy, vals = saved[li]
            if lv.requires_grad:
                h, w = lv.data.shape[1:]
                flat_acc = np.zeros(n * h * w, dtype=np.float64)
                for xc, yc, wgt, _ in cs:
                    idx = (nn * (h * w) + yc * w + xc).ravel()
                    flat_acc += np.bincount(idx, weights=(gl * wgt).ravel(),
                                            minlength=n * h * w)
                accumulate(lv, flat_acc.reshape(n, h, w).astype(dtype))
            if flow_coarse.requires_grad:
                v00, v10, v01, v11 = vals
                dqx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
                dqy = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
                gflow_x += (gl * dqx).sum(axis=1) * s
                gflow_y += (gl * dqy).sum(axis=1) * s
        if flow_coarse.requires_grad:
            gf = np.stack([gflow_x, gflow_y]).reshape(2, gh, gw)
            accumulate(flow_coarse, gf)

    return register_op(out_data, parents, bwd)


def nearest_upsample(x: Tensor, k: int) -> Tensor:
    """(c, h, w) -> (c, h*k, w*k) by replication; gradient block-sums."""
    c, h, w = x.shape

    def bwd(g):
        accumulate(x, g.reshape(c, h, k, w, k).sum(axis=(2, 4)))

    out = np.repeat(np.repeat(x.data, k, axis=1), k, axis=2)
    return register_op(out, [x], bwd)


def warp_image(img: np.ndarray, flow_px: Tensor) -> Tensor:
    """Sample a constant image at (x + u, y + v), bilinear, edge-clamped.

    Differentiable in the flow only (the image is plain sample data).
    Clamped positions contribute zero flow gradient.
    """
    h, w = img.shape
    if flow_px.shape != (2, h, w):
        raise ShapeError(f"flow must be (2, {h}, {w}), got {flow_px.shape}")
    xs = np.arange(w, dtype=img.dtype)[None, :] + flow_px.data[0]
    ys = np.arange(h, dtype=img.dtype)[:, None] + flow_px.data[1]
    in_x = (xs >= 0) & (xs <= w - 1)
    in_y = (ys >= 0) & (ys <= h - 1)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    xf = np.floor(xc)
    yf = np.floor(yc)
    fx = xc - xf
    fy = yc - yf
    x0 = xf.astype(np.int64)
    y0 = yf.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = img[y0, x0]
    v10 = img[y0, x1]
    v01 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 + (v10 - v00) * fx
    bot = v01 + (v11 - v01) * fx
    out = top + (bot - top) * fy

    def bwd(g):
        dx = ((1 - fy) * (v10 - v00) + fy * (v11 - v01)) * in_x
        dy = ((1 - fx) * (v01 - v00) + fx * (v11 - v10)) * in_y
        accumulate(flow_px, np.stack([g * dx, g * dy]))

    return register_op(out, [flow_px], bwd)


@dataclass
class PhotometricPyramid:
    """Per-sample constants for warp-residual statistics.

    The gradient normal matrix A = [[Sxx, Sxy], [Sxy, Syy]] per cell
    depends only on frame 1, so its (damped) inverse is precomputed; the
    Gauss-Newton flow correction -A^-1 [Sex, Sey] is then linear in the
    differentiable residual moments.
    """

    i1: np.ndarray            # (H, W) frame-1 intensities
    i2: np.ndarray            # (H, W) frame-2 intensities
    gx: np.ndarray            # frame-1 x gradient
    gy: np.ndarray            # frame-1 y gradient
    inv_a: np.ndarray         # (2, 2, N) damped inverse normal matrices
    extra: Tensor             # (3, N) O(1) confidence channels
    e_scale: float            # typical residual magnitude for normalization


def _cell_pool(x: Tensor, gh: int, gw: int, patch: int) -> Tensor:
    """Mean over patch blocks: (H, W) -> (1, gh*gw)."""
    pooled = ad.tmean(ad.reshape(x, (gh, patch, gw, patch)), axis=(1, 3))
    return ad.reshape(pooled, (1, gh * gw))


def photometric_constants(frame1: np.ndarray, frame2: np.ndarray,
                          gh: int, gw: int, patch: int) -> PhotometricPyramid:
    i1 = (frame1.mean(axis=2) if frame1.ndim == 3 else frame1).astype(np.float64)
    i2 = (frame2.mean(axis=2) if frame2.ndim == 3 else frame2).astype(np.float64)
    gy, gx = np.gradient(i1)

    def pool(a):
        return a.reshape(gh, patch, gw, patch).mean(axis=(1, 3)).reshape(-1)

    sxx = pool(gx * gx)
    syy = pool(gy * gy)
    sxy = pool(gx * gy)
    energy = sxx + syy
    damp = 1e-3 * float(energy.mean()) + 1e-12
    det = (sxx + damp) * (syy + damp) - sxy * sxy
    inv_a = np.stack([
        np.stack([(syy + damp) / det, -sxy / det]),
        np.stack([-sxy / det, (sxx + damp) / det]),
    ])
    # O(1) confidence channels: log gradient energy and corner-ness
    energy_n = np.log1p(energy / (energy.mean() + 1e-12))
    corner = det / (energy * energy + 1e-12)
    dtype = frame1.dtype if frame1.dtype in (np.float32, np.float64) else np.float32
    extra = np.stack([energy_n, corner, sxy / (energy + 1e-12)])
    return PhotometricPyramid(
        i1=i1.astype(dtype), i2=i2.astype(dtype),
        gx=gx.astype(dtype), gy=gy.astype(dtype),
        inv_a=inv_a.astype(dtype), extra=Tensor(extra.astype(dtype)),
        e_scale=float(np.abs(i2 - i1).mean() + 1e-6))


def photometric_features(pyr: PhotometricPyramid, coarse_flow: Tensor,
                         gh: int, gw: int, patch: int) -> Tensor:
    """Per-cell warp-residual statistics, (7, N), all O(1).

    Under brightness constancy the residual e = I2(x + f) - I1(x) is
    locally grad I . (f - f_true), so the damped Gauss-Newton correction
    -A^-1 [mean e*gx, mean e*gy] estimates the remaining flow directly in
    pixel units.  Channels: [gn_u, gn_v (cell units), e, |e| (residual
    scale units), log energy, corner-ness, normalized Sxy].
    """
    flow_px = ad.scale(nearest_upsample(coarse_flow, patch), float(patch))
    warped = warp_image(pyr.i2, flow_px)
    e = ad.sub(warped, Tensor(pyr.i1))
    sex = _cell_pool(ad.mul(e, Tensor(pyr.gx)), gh, gw, patch)
    sey = _cell_pool(ad.mul(e, Tensor(pyr.gy)), gh, gw, patch)
    inv = pyr.inv_a
    gn_u = ad.neg(ad.add(ad.mul(sex, Tensor(inv[0, 0][None, :])),
                         ad.mul(sey, Tensor(inv[0, 1][None, :]))))
    gn_v = ad.neg(ad.add(ad.mul(sex, Tensor(inv[1, 0][None, :])),
                         ad.mul(sey, Tensor(inv[1, 1][None, :]))))
    inv_patch = 1.0 / float(patch)
    parts = [
        ad.scale(gn_u, inv_patch),                    # cell units
        ad.scale(gn_v, inv_patch),
        ad.scale(_cell_pool(e, gh, gw, patch), 1.0 / pyr.e_scale),
        ad.scale(_cell_pool(ad.tabs(e), gh, gw, patch), 1.0 / pyr.e_scale),
    ]
    return ad.concat(parts + [pyr.extra], axis=0)


# ---------------------------------------------------------------------------
# convex upsampling

def _convex_combine(coarse: Tensor, weights: Tensor, factor: int) -> Tensor:
    """Blend each fine pixel from its 3x3 coarse neighborhood.

    ``weights`` is (9, f, f, gh, gw), already softmax-normalized over the
    first axis.  The coarse field is edge-padded, so every output stays a
    convex combination of real neighborhood values.
    """
    c, gh, gw = coarse.shape
    cpad = np.pad(coarse.data, ((0, 0), (1, 1), (1, 1)), mode="edge")
    nb = np.stack([cpad[:, a:a + gh, b:b + gw]
                   for a in range(3) for b in range(3)], axis=0)  # (9, c, gh, gw)
    out = np.einsum("ndeij,ncij->cidje", weights.data, nb, optimize=True)
    out = np.ascontiguousarray(out.reshape(c, gh * factor, gw * factor))

    def bwd(g):
        go = g.reshape(c, gh, factor, gw, factor)
        if weights.requires_grad:
            accumulate(weights, np.einsum("cidje,ncij->ndeij", go, nb,
                                          optimize=True))
        if coarse.requires_grad:
            gnb = np.einsum("cidje,ndeij->ncij", go, weights.data, optimize=True)
            gpad = np.zeros((c, gh + 2, gw + 2), dtype=g.dtype)
            k = 0
            for a in range(3):
                for b in range(3):
                    gpad[:, a:a + gh, b:b + gw] += gnb[k]
                    k += 1
            gc = gpad[:, 1:-1, 1:-1].copy()
            gc[:, 0, :] += gpad[:, 0, 1:-1]
            gc[:, -1, :] += gpad[:, -1, 1:-1]
            gc[:, :, 0] += gpad[:, 1:-1, 0]
            gc[:, :, -1] += gpad[:, 1:-1, -1]
            gc[:, 0, 0] += gpad[:, 0, 0]
            gc[:, 0, -1] += gpad[:, 0, -1]
            gc[:, -1, 0] += gpad[:, -1, 0]
            gc[:, -1, -1] += gpad[:, -1, -1]
            accumulate(coarse, gc)

    return register_op(out, [coarse, weights], bwd)


def convex_upsample(coarse: Tensor, mask: Tensor, factor: int,
                    value_scale: float = 1.0) -> Tensor:
    """Upsample (c, gh, gw) to (c, gh*f, gw*f) with a learned convex mask.

    ``mask`` is raw logits of shape (9*f*f, gh, gw), channel index
    n*f*f + di*f + dj for neighbor n (row-major over the 3x3 window) and
    sub-pixel (di, dj); softmax runs over the 9 neighbors.  For flow,
    pass value_scale=factor to rescale displacements to pixel units.
    """
    if coarse.data.ndim != 3:
        raise ShapeError(f"coarse must be (c, gh, gw), got {coarse.shape}")
    c, gh, gw = coarse.shape
    if mask.shape != (9 * factor * factor, gh, gw):
        raise ShapeError(
            f"mask must be ({9 * factor * factor}, {gh}, {gw}), got {mask.shape}")
    w = ad.softmax(ad.reshape(mask, (9, factor, factor, gh, gw)), axis=0)
    src = coarse if value_scale == 1.0 else ad.scale(coarse, value_scale)
    return _convex_combine(src, w, factor)


# ---------------------------------------------------------------------------
# parameter containers

_NEIGHBOR_IDX_CACHE: dict = {}


def _neighbor_index(gh: int, gw: int) -> np.ndarray:
    """Flat (9*N,) gather map for 3x3 neighborhoods; N marks out-of-grid."""
    key = (gh, gw)
    cached = _NEIGHBOR_IDX_CACHE.get(key)
    if cached is not None:
        return cached
    n = gh * gw
    ii, jj = np.divmod(np.arange(n), gw)
    parts = []
    for a in (-1, 0, 1):
        for b in (-1, 0, 1):
            ni = ii + a
            nj = jj + b
            inside = (ni >= 0) & (ni < gh) & (nj >= 0) & (nj < gw)
            parts.append(np.where(inside, ni * gw + nj, n))
    idx = np.concatenate(parts)
    _NEIGHBOR_IDX_CACHE[key] = idx
    return idx


def unfold3x3(x: Tensor, gh: int, gw: int) -> Tensor:
    """Stack each cell's 3x3 neighborhood: (C, N) -> (9C, N), zero padded."""
    c, n = x.shape
    if n != gh * gw:
        raise ShapeError(f"unfold3x3: {n} tokens vs grid {gh}x{gw}")
    padded = ad.concat([x, Tensor(np.zeros((c, 1), dtype=x.dtype))], axis=1)
    gathered = ad.gather_cols(padded, _neighbor_index(gh, gw))   # (C, 9N)
    return ad.reshape(ad.transpose(ad.reshape(gathered, (c, 9, n)), (1, 0, 2)),
                      (9 * c, n))


@dataclass
class Linear:
    w: Tensor
    b: Optional[Tensor] = None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(self.w, x)
        return out if self.b is None else ad.add_bias(out, self.b)


@dataclass
class Conv3x3:
    """3x3 convolution over the token grid, expressed as unfold + matmul."""

    w: Tensor                      # (out, 9*in)
    b: Optional[Tensor] = None

    def __call__(self, x: Tensor, gh: int, gw: int) -> Tensor:
        out = ad.matmul(self.w, unfold3x3(x, gh, gw))
        return out if self.b is None else ad.add_bias(out, self.b)


@dataclass
class GruParams:
    wz: Linear
    wr: Linear
    wh: Linear


def gru_step(p: GruParams, h: Tensor, x: Tensor) -> Tensor:
    hx = ad.concat([h, x], axis=0)
    z = ad.sigmoid(p.wz(hx))
    r = ad.sigmoid(p.wr(hx))
    cand = ad.tanh(p.wh(ad.concat([ad.mul(r, h), x], axis=0)))
    return ad.add(h, ad.mul(z, ad.sub(cand, h)))


@dataclass
class UpdateHeadParams:
    """Shared structure of the flow and depth update operators.

    Per-cell evidence (correlation lookups, current estimate, context) is
    pooled by a 3x3 mixing convolution before the gated recurrent cell;
    a purely pointwise operator cannot aggregate matching evidence across
    cells and measurably fails to learn.
    """

    est_channels: int            # 2 for flow, 1 for log-depth
    factor: int                  # upsampling factor (patch size)
    radius: int
    corr_enc: Optional[Linear]   # None for the depth head
    photo_enc: Optional[Linear]  # warp-residual statistics (flow only)
    est_enc: Linear
    ctx_hidden: Linear
    ctx_input: Linear
    mix: Conv3x3                 # spatial aggregation ahead of the cell
    gru: GruParams
    delta_hidden: Linear
    # delta_out / mask_out start at small random weights (bias zero), not
    # zeros: with both output layers zeroed, no gradient reaches the cell
    # or the encoders (both exits from the hidden state have zero weight),
    # and the near-zero saddle of the L1 loss under symmetric motion takes
    # far longer than a desk-scale step budget to escape (measured).
    delta_out: Linear
    mask_out: Linear


def _linear(rng, out_dim, in_dim, dtype, scale=None, bias=True, conv=False):
    bound = (1.0 / np.sqrt(in_dim)) if scale is None else scale
    w = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype),
               requires_grad=True)
    b = Tensor(np.zeros((out_dim, 1), dtype=dtype), requires_grad=True) if bias else None
    return Conv3x3(w, b) if conv else Linear(w, b)


def init_update_head(task: str, d_ctx: int, factor: int,
                     rng: np.random.Generator, hidden: int = 96,
                     radius: int = LOOKUP_RADIUS_DEFAULT,
                     levels: int = CORR_LEVELS_DEFAULT,
                     dtype=np.float32) -> UpdateHeadParams:
    est_channels = 2 if task == "flow" else 1
    corr_feat = levels * (2 * radius + 1) ** 2
    corr_dim = 64
    photo_dim = 16
    est_dim = 16
    ctx_dim = 32
    mix_dim = 64
    corr_enc = _linear(rng, corr_dim, corr_feat, dtype) if task == "flow" else None
    photo_enc = _linear(rng, photo_dim, 7, dtype) if task == "flow" else None
    mix_in = ((corr_dim + photo_dim) if task == "flow" else 0) \
        + est_dim + est_channels + ctx_dim
    gru = GruParams(
        wz=_linear(rng, hidden, hidden + mix_dim, dtype),
        wr=_linear(rng, hidden, hidden + mix_dim, dtype),
        wh=_linear(rng, hidden, hidden + mix_dim, dtype),
    )
    return UpdateHeadParams(
        est_channels=est_channels,
        factor=factor,
        radius=radius,
        corr_enc=corr_enc,
        photo_enc=photo_enc,
        est_enc=_linear(rng, est_dim, est_channels, dtype),
        ctx_hidden=_linear(rng, hidden, d_ctx, dtype),
        ctx_input=_linear(rng, ctx_dim, d_ctx, dtype),
        mix=_linear(rng, mix_dim, 9 * mix_in, dtype, conv=True),
        gru=gru,
        delta_hidden=_linear(rng, 128, hidden + mix_dim, dtype),
        delta_out=_linear(rng, est_channels, 128, dtype, scale=0.02),
        mask_out=_linear(rng, 9 * factor * factor, hidden, dtype, scale=0.02),
    )


# ---------------------------------------------------------------------------
# update steps

def init_head_state(p: UpdateHeadParams, context: TokenGrid,
                    t_dec: int) -> HeadState:
    hidden = ad.tanh(p.ctx_hidden(context.tokens))
    coarse = Tensor(np.zeros((p.est_channels, context.n_tokens),
                             dtype=context.tokens.dtype))
    return HeadState(hidden=hidden, coarse=coarse, step=0, t_max=t_dec)


def _update_step(p: UpdateHeadParams, state: HeadState, parts: List[Tensor],
                 context: TokenGrid):
    if state.step >= state.t_max:
        raise ContractError(
            f"update step {state.step} called beyond T_dec={state.t_max}")
    parts = parts + [ad.relu(p.est_enc(state.coarse)), state.coarse,
                     ad.relu(p.ctx_input(context.tokens))]
    mixed = ad.relu(p.mix(ad.concat(parts, axis=0),
                          context.grid_h, context.grid_w))
    h = gru_step(p.gru, state.hidden, mixed)
    # the mixed features skip into the delta head: the residual readout
    # then sits two layers from the inputs instead of behind the cell
    delta = p.delta_out(ad.relu(p.delta_hidden(ad.concat([h, mixed], axis=0))))
    mask = p.mask_out(h)
    new_state = HeadState(hidden=h, coarse=ad.add(state.coarse, delta),
                          step=state.step + 1, t_max=state.t_max)
    return new_state, mask


def flow_update_step(p: UpdateHeadParams, state: HeadState,
                     corr_features: Tensor, context: TokenGrid,
                     photo_features: Optional[Tensor] = None):
    """One residual flow update: new coarse flow = old + delta."""
    if photo_features is None:
        photo_features = Tensor(np.zeros((7, context.n_tokens),
                                         dtype=context.tokens.dtype))
    return _update_step(
        p, state,
        [ad.relu(p.corr_enc(corr_features)), ad.relu(p.photo_enc(photo_features))],
        context)


def depth_update_step(p: UpdateHeadParams, state: HeadState,
                      context: TokenGrid):
    """One residual log-depth update (no correlation input)."""
    return _update_step(p, state, [], context)


# ---------------------------------------------------------------------------
# full head forwards

def _coarse_grid(state: HeadState, tg: TokenGrid) -> Tensor:
    return ad.reshape(state.coarse, (state.coarse.shape[0], tg.grid_h, tg.grid_w))


def flow_head_forward(p: UpdateHeadParams, feat1: TokenGrid, feat2: TokenGrid,
                      t_dec: int, context: Optional[TokenGrid] = None,
                      images: Optional[tuple] = None) -> List[FlowField]:
    """Correlation volume, T_dec residual updates, per-step upsampling.

    The estimate starts at zero; the last list element is the prediction.
    ``images`` (frame1, frame2 pixel arrays) enables the warp-residual
    statistics; without them that input block is zero.
    """
    if t_dec < 1:
        raise ContractError(f"T_dec must be >= 1, got {t_dec}")
    ctx = context if context is not None else feat1
    vol = correlation_volume(feat1, feat2)
    pyr = None
    if images is not None:
        pyr = photometric_constants(images[0], images[1], feat1.grid_h,
                                    feat1.grid_w, p.factor)
    state = init_head_state(p, ctx, t_dec)
    h_px = feat1.grid_h * p.factor
    w_px = feat1.grid_w * p.factor
    valid = np.ones((h_px, w_px), dtype=bool)
    out: List[FlowField] = []
    for _ in range(t_dec):
        coarse = _coarse_grid(state, feat1)
        corr_feat = lookup(vol, coarse, p.radius)
        photo = None
        if pyr is not None:
            photo = photometric_features(pyr, coarse, feat1.grid_h,
                                         feat1.grid_w, p.factor)
        state, mask = flow_update_step(p, state, corr_feat, ctx, photo)
        mask = ad.reshape(mask, (mask.shape[0], feat1.grid_h, feat1.grid_w))
        up = convex_upsample(_coarse_grid(state, feat1), mask, p.factor,
                             value_scale=float(p.factor))
        u = ad.reshape(ad.narrow(up, 0, 0, 1), (h_px, w_px))
        v = ad.reshape(ad.narrow(up, 0, 1, 1), (h_px, w_px))
        out.append(FlowField(u=u, v=v, valid=valid))
    return out


def depth_head_forward(p: UpdateHeadParams, feat: TokenGrid, t_dec: int,
                       context: Optional[TokenGrid] = None) -> List[DepthMap]:
    """As the flow head, in log-depth: init 1 everywhere, exp on output."""
    if t_dec < 1:
        raise ContractError(f"T_dec must be >= 1, got {t_dec}")
    ctx = context if context is not None else feat
    state = init_head_state(p, ctx, t_dec)
    h_px = feat.grid_h * p.factor
    w_px = feat.grid_w * p.factor
    valid = np.ones((h_px, w_px), dtype=bool)
    out: List[DepthMap] = []
    for _ in range(t_dec):
        state, mask = depth_update_step(p, state, ctx)
        mask = ad.reshape(mask, (mask.shape[0], feat.grid_h, feat.grid_w))
        up = convex_upsample(_coarse_grid(state, feat), mask, p.factor)
        # log-depth is clamped to +-20 (depth within [2e-9, 5e8]) so exp
        # stays strictly positive and finite for any parameter values
        logd = ad.neg(ad.clamp_min(ad.neg(ad.clamp_min(up, -20.0)), -20.0))
        d = ad.exp(ad.reshape(logd, (h_px, w_px)))
        out.append(DepthMap(d=d, valid=valid))
    return out


def head_parameters(p: UpdateHeadParams, prefix: str) -> dict:
    """Named parameter tensors for checkpointing and optimization."""
    named = {}

    def put(name, lin):
        if lin is None:
            return
        named[f"{prefix}.{name}.w"] = lin.w
        if lin.b is not None:
            named[f"{prefix}.{name}.b"] = lin.b

    put("corr_enc", p.corr_enc)
    put("photo_enc", p.photo_enc)
    put("est_enc", p.est_enc)
    put("ctx_hidden", p.ctx_hidden)
    put("ctx_input", p.ctx_input)
    put("mix", p.mix)
    put("gru.wz", p.gru.wz)
    put("gru.wr", p.gru.wr)
    put("gru.wh", p.gru.wh)
    put("delta_hidden", p.delta_hidden)
    put("delta_out", p.delta_out)
    put("mask_out", p.mask_out)
    return named
