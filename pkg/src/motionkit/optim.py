"""AdamW with decoupled weight decay, global-norm clipping, one-cycle LR."""

from __future__ import annotations

import math
from typing import Dict, Iterable

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


class AdamW:
    """Adaptive moments with decoupled weight decay, in-place updates.

    Parameter updates are the only sanctioned mutation of tensors;
    gradients must be zeroed by the caller between steps (zero_grad).
    """

    def __init__(self, params: Dict[str, Tensor], lr: float = 3e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(np.float64)
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data[...] = (p.data - lr * update).astype(p.dtype)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grad_norm_(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def one_cycle_lr(step: int, total_steps: int, lr_max: float,
                 pct_start: float = 0.25, div_start: float = 25.0,
                 div_final: float = 1e4) -> float:
    """Cosine one-cycle schedule: ramp to lr_max, anneal to lr_max/div_final."""
    if total_steps < 1:
        raise ConfigError("one_cycle_lr needs total_steps >= 1")
    step = min(max(step, 0), total_steps - 1)
    warm = max(1, int(round(pct_start * total_steps)))
    lr_start = lr_max / div_start
    lr_final = lr_max / div_final
    if step < warm:
        t = step / warm
        return lr_start + (lr_max - lr_start) * 0.5 * (1 - math.cos(math.pi * t))
    t = (step - warm) / max(1, total_steps - warm)
    return lr_final + (lr_max - lr_final) * 0.5 * (1 + math.cos(math.pi * t))


def constant_lr(step: int, total_steps: int, lr_max: float) -> float:
    return lr_max


SCHEDULES = {"onecycle": one_cycle_lr, "constant": constant_lr}
