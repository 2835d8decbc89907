"""Full model assembly: tokenizer -> denoiser -> prototypes -> heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .denoiser import (DenoiserStack, init_denoiser, orthonormality_defect,
                       reorthonormalize_)
from .errors import ConfigError, TaskError
from .heads import (DepthMap, FlowField, UpdateHeadParams, depth_head_forward,
                    flow_head_forward, head_parameters, init_update_head)
from .prototypes import PrototypeSet, broadcast_prototypes, prototype_iterate
from .tokenizer import ImageBuffer, PatchEmbed, TokenGrid, init_patch_embed, patchify

TASKS = ("flow", "depth", "joint")


@dataclass
class ModelConfig:
    """Desk-scale defaults; paper-scale values (K=100, T_dec=12) are plain
    config choices away."""

    D: int = 64
    d: int = 32
    layers: int = 2
    head_dim: int = 8
    K_prototypes: int = 8
    T_cluster: int = 3
    sinkhorn_reg: float = 0.05
    sinkhorn_iters: int = 100
    T_dec: int = 8
    patch: int = 8
    hidden_width: int = 96
    image_size: int = 64
    channels: int = 1
    lookup_radius: int = 3

    def validate(self):
        positives = {"D": self.D, "d": self.d, "layers": self.layers,
                     "head_dim": self.head_dim, "K_prototypes": self.K_prototypes,
                     "T_cluster": self.T_cluster, "T_dec": self.T_dec,
                     "patch": self.patch, "hidden_width": self.hidden_width,
                     "image_size": self.image_size,
                     "lookup_radius": self.lookup_radius}
        for name, value in positives.items():
            if value < 1:
                raise ConfigError(f"model.{name} must be positive, got {value}")
        if self.sinkhorn_reg <= 0:
            raise ConfigError("sinkhorn_reg must be positive")
        if self.d % self.head_dim or self.D % self.head_dim:
            raise ConfigError(
                f"head_dim {self.head_dim} must divide d={self.d} and D={self.D}")
        if self.d >= self.D:
            raise ConfigError(f"d={self.d} must be smaller than D={self.D}")
        if self.image_size % self.patch:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch {self.patch}")
        n_tokens = (self.image_size // self.patch) ** 2
        if self.K_prototypes > n_tokens:
            raise ConfigError(
                f"K_prototypes {self.K_prototypes} exceeds token count {n_tokens}")
        return self


class MotionModel:
    """Shared encoder with task heads; one instance per task or joint."""

    def __init__(self, cfg: ModelConfig, task: str = "flow",
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
        cfg.validate()
        self.cfg = cfg
        self.task = task
        self.dtype = dtype
        rng = rng if rng is not None else np.random.Generator(np.random.Philox(0))
        grid = cfg.image_size // cfg.patch
        self.embed: PatchEmbed = init_patch_embed(
            cfg.D, cfg.patch, cfg.channels, grid, grid, rng, dtype)
        self.denoiser: DenoiserStack = init_denoiser(
            cfg.D, cfg.d, cfg.layers, cfg.head_dim, rng, dtype)
        self._calibrate_feature_scale(rng)
        # zero-initialized fusion: prototypes enter as a learned residual
        self.proto_proj = Tensor(np.zeros((cfg.d, 2 * cfg.d), dtype=dtype),
                                 requires_grad=True)
        self.flow_head: Optional[UpdateHeadParams] = None
        self.depth_head: Optional[UpdateHeadParams] = None
        if task in ("flow", "joint"):
            self.flow_head = init_update_head(
                "flow", d_ctx=cfg.d, factor=cfg.patch, rng=rng,
                hidden=cfg.hidden_width, radius=cfg.lookup_radius, dtype=dtype)
        if task in ("depth", "joint"):
            self.depth_head = init_update_head(
                "depth", d_ctx=cfg.d, factor=cfg.patch, rng=rng,
                hidden=cfg.hidden_width, radius=cfg.lookup_radius, dtype=dtype)

    def _calibrate_feature_scale(self, rng: np.random.Generator):
        """Rescale each reducing layer so features keep their RMS at init.

        The weighted-projection denoise step is a convex combination of
        contractions; with diffuse init weights it shrinks token RMS by
        roughly the subspace count per layer, which starves the heads of
        signal at desk-scale step budgets.  Each out_proj is therefore
        initialized with orthonormal rows times a gain measured on a probe
        image pushed through the freshly built embed and layers.
        """
        from . import autodiff as ad
        from .denoiser import ista_project, orthonormalize, subspace_denoise
        cfg = self.cfg
        probe_img = ImageBuffer(
            cfg.image_size, cfg.image_size, cfg.channels,
            rng.uniform(0.0, 1.0, size=(cfg.image_size, cfg.image_size,
                                        cfg.channels)).astype(self.dtype))
        with ad.no_grad():
            z = patchify(probe_img, self.embed).tokens
            for layer in self.denoiser.layers:
                rms_in = float(np.sqrt(np.mean(z.data ** 2)) + 1e-12)
                z = ista_project(subspace_denoise(z, layer), layer)
                rms_out = float(np.sqrt(np.mean(z.data ** 2)) + 1e-12)
                if layer.out_proj is not None:
                    d_out, d_in = layer.out_proj.shape
                    basis = orthonormalize(
                        Tensor(rng.normal(size=(d_in, d_out)).astype(self.dtype)))
                    layer.out_proj.data[...] = (
                        basis.data.T * (rms_in / rms_out)).astype(self.dtype)
                    z = ad.matmul(layer.out_proj, z)

    # -- forward pieces --------------------------------------------------
    def encode(self, img: ImageBuffer) -> TokenGrid:
        from .denoiser import denoiser_forward
        return denoiser_forward(patchify(img, self.embed), self.denoiser)

    def prototype_context(self, feat: TokenGrid) -> Tuple[TokenGrid, PrototypeSet]:
        ps = prototype_iterate(feat, self.cfg.K_prototypes, self.cfg.T_cluster,
                               reg=self.cfg.sinkhorn_reg,
                               max_iters=self.cfg.sinkhorn_iters)
        return broadcast_prototypes(feat, ps, self.proto_proj), ps

    @staticmethod
    def _unit_columns(tg: TokenGrid) -> TokenGrid:
        """Scale token columns to unit norm; correlations become cosines.

        Raw dot products scale with per-cell feature energy, which swamps
        the displacement signal in the correlation windows.
        """
        from . import autodiff as ad
        t = tg.tokens
        sq = ad.tsum(ad.mul(t, t), axis=0, keepdims=True)
        inv = ad.div(1.0, ad.sqrt(ad.add(sq, 1e-8)))
        return tg.with_tokens(ad.scale_cols(t, ad.reshape(inv, (t.shape[1], 1))))

    def predict_flow(self, img1: ImageBuffer, img2: ImageBuffer,
                     t_dec: Optional[int] = None) -> List[FlowField]:
        if self.flow_head is None:
            raise TaskError(f"model task {self.task!r} has no flow head")
        f1 = self.encode(img1)
        f2 = self.encode(img2)
        ctx, _ = self.prototype_context(f1)
        return flow_head_forward(self.flow_head, self._unit_columns(f1),
                                 self._unit_columns(f2),
                                 t_dec or self.cfg.T_dec, context=ctx,
                                 images=(img1.data, img2.data))

    def predict_depth(self, img: ImageBuffer,
                      t_dec: Optional[int] = None) -> List[DepthMap]:
        if self.depth_head is None:
            raise TaskError(f"model task {self.task!r} has no depth head")
        feat = self.encode(img)
        ctx, _ = self.prototype_context(feat)
        return depth_head_forward(self.depth_head, feat,
                                  t_dec or self.cfg.T_dec, context=ctx)

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {
            "embed.weight": self.embed.weight,
            "embed.pos": self.embed.pos,
            "proto_proj": self.proto_proj,
        }
        for i, layer in enumerate(self.denoiser.layers):
            base = f"denoiser.layer{i}"
            for k, u in enumerate(layer.U):
                named[f"{base}.U{k}"] = u
            named[f"{base}.O"] = layer.O
            named[f"{base}.rho"] = layer.rho
            if layer.out_proj is not None:
                named[f"{base}.out_proj"] = layer.out_proj
        if self.flow_head is not None:
            named.update(head_parameters(self.flow_head, "flow_head"))
        if self.depth_head is not None:
            named.update(head_parameters(self.depth_head, "depth_head"))
        return named

    def reorthonormalize(self):
        for layer in self.denoiser.layers:
            reorthonormalize_(layer)

    def orthonormality_defect(self) -> float:
        if not self.denoiser.layers:
            return 0.0
        return max(orthonormality_defect(l) for l in self.denoiser.layers)

    def load_state(self, state: Dict[str, np.ndarray]):
        named = self.named_parameters()
        missing = sorted(set(named) - set(state))
        extra = sorted(set(state) - set(named))
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {missing[:4]}")
        if extra:
            raise ConfigError(f"checkpoint has unknown parameters: {extra[:4]}")
        for name, tensor in named.items():
            arr = state[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ConfigError(
                    f"checkpoint parameter {name} has shape {arr.shape}, "
                    f"expected {tensor.shape}")
            tensor.data[...] = arr.astype(tensor.dtype)
