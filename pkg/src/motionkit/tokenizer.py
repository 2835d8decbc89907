"""Patch tokenization: images to token matrices and back to feature grids.

Tokens are stored column-wise, X in R^{D x N}, with column n mapping to
grid cell (n // grid_w, n % grid_w).  Patches are non-overlapping;
each is flattened row-major (channel-interleaved), linearly projected
to D dims, and summed with a learned per-cell positional embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, TokenizationError


@dataclass
class ImageBuffer:
    """Dense image with float values in [0, 1], shape (H, W, C)."""

    height: int
    width: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.data.shape != (self.height, self.width, self.channels):
            raise ShapeError(
                f"image data {self.data.shape} does not match "
                f"({self.height}, {self.width}, {self.channels})")
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ConfigError(f"image values must lie in [0,1], got [{lo}, {hi}]")


def make_image(data: np.ndarray) -> ImageBuffer:
    if data.ndim == 2:
        data = data[:, :, None]
    return ImageBuffer(data.shape[0], data.shape[1], data.shape[2],
                       np.ascontiguousarray(data))


@dataclass
class TokenGrid:
    """Token matrix (D x N) plus its 2-D grid geometry."""

    tokens: Tensor
    grid_h: int
    grid_w: int
    patch: int

    def __post_init__(self):
        if self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ShapeError(
                f"N={self.tokens.shape[1]} != grid {self.grid_h}x{self.grid_w}")

    @property
    def width(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Tensor) -> "TokenGrid":
        return TokenGrid(tokens, self.grid_h, self.grid_w, self.patch)


@dataclass
class PatchEmbed:
    """Learned patch projection and additive positional table."""

    weight: Tensor   # (D, patch*patch*channels)
    pos: Tensor      # (D, N) for the grid the model was built for
    patch: int
    channels: int
    grid_h: int
    grid_w: int


def init_patch_embed(D: int, patch: int, channels: int, grid_h: int, grid_w: int,
                     rng: np.random.Generator, dtype=np.float32) -> PatchEmbed:
    """Fan-in uniform projection, zero positional table.

    The zero positional start preserves patch-granular translation
    equivariance at initialization.
    """
    fan_in = patch * patch * channels
    bound = 1.0 / np.sqrt(fan_in)
    weight = Tensor(rng.uniform(-bound, bound, size=(D, fan_in)).astype(dtype),
                    requires_grad=True)
    pos = Tensor(np.zeros((D, grid_h * grid_w), dtype=dtype), requires_grad=True)
    return PatchEmbed(weight, pos, patch, channels, grid_h, grid_w)


def patch_matrix(img: ImageBuffer, patch: int) -> np.ndarray:
    """Flatten non-overlapping patches into a (patch*patch*C, N) matrix."""
    if img.height % patch or img.width % patch:
        raise TokenizationError(
            f"image {img.height}x{img.width} not divisible by patch {patch}")
    gh, gw = img.height // patch, img.width // patch
    x = img.data.reshape(gh, patch, gw, patch, img.channels)
    x = x.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * img.channels)
    return np.ascontiguousarray(x.T)


def patchify(img: ImageBuffer, params: PatchEmbed) -> TokenGrid:
    """Project patches to tokens and add the positional embedding."""
    gh, gw = img.height // params.patch, img.width // params.patch
    if img.channels != params.channels:
        raise TokenizationError(
            f"image has {img.channels} channels, embed expects {params.channels}")
    flat = patch_matrix(img, params.patch)
    if (gh, gw) != (params.grid_h, params.grid_w):
        raise TokenizationError(
            f"grid {gh}x{gw} does not match the positional table "
            f"{params.grid_h}x{params.grid_w}")
    x = Tensor(flat.astype(params.weight.dtype))
    tokens = ad.add(ad.matmul(params.weight, x), params.pos)
    return TokenGrid(tokens, gh, gw, params.patch)


def to_feature_grid(tg: TokenGrid) -> Tensor:
    """Column-to-cell reshape, (D, N) -> (D, grid_h, grid_w)."""
    return ad.reshape(tg.tokens, (tg.width, tg.grid_h, tg.grid_w))


def from_feature_grid(grid: Tensor, tg: TokenGrid) -> TokenGrid:
    """Exact inverse of :func:`to_feature_grid`."""
    return tg.with_tokens(ad.reshape(grid, (grid.shape[0], tg.grid_h * tg.grid_w)))
