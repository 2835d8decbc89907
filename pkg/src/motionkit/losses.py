"""Training losses and evaluation metrics for flow and depth.

Losses (sequence-weighted L1, SILog) are differentiable tensor
expressions; metrics (AEPE, Fl-all, AbsRel, SqRel, RMSE) are plain
numpy evaluations reported as :class:`MetricReport`.  Invalid pixels
are excluded everywhere via the validity mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegeneracyError, DomainError, ShapeError
from .heads import DepthMap, FlowField

SILOG_LAMBDA_DEFAULT = 0.85
SILOG_ALPHA_DEFAULT = 10.0
SEQUENCE_GAMMA_DEFAULT = 0.8
# joint-task batches combine flow and depth losses with this SILog weight
JOINT_SILOG_WEIGHT = 0.1


@dataclass
class MetricReport:
    name: str
    value: float
    n_valid: int

    def line(self) -> str:
        """Serialization contract: `name value n_valid`, 6 decimals."""
        return f"{self.name} {self.value:.6f} {self.n_valid}"


def _resolve_valid(valid, fallback) -> np.ndarray:
    v = fallback if valid is None else valid
    return np.asarray(v, dtype=bool)


def _masked_mean(x: Tensor, mask: np.ndarray, n_valid: int) -> Tensor:
    weights = Tensor(mask.astype(x.dtype))
    return ad.scale(ad.tsum(ad.mul(x, weights)), 1.0 / n_valid)


def sequence_l1_loss(preds: Sequence[FlowField], gt: FlowField,
                     gamma: float = SEQUENCE_GAMMA_DEFAULT,
                     valid: Optional[np.ndarray] = None) -> Tensor:
    """sum_i gamma^(n-i) * mean_valid(|du_i| + |dv_i|), i = 1..n."""
    if len(preds) == 0:
        raise ContractError("sequence loss needs at least one prediction")
    if not 0 < gamma <= 1:
        raise ContractError(f"gamma must be in (0, 1], got {gamma}")
    mask = _resolve_valid(valid, gt.valid)
    if mask.shape != gt.u.shape:
        raise ShapeError(f"valid mask {mask.shape} vs flow {gt.u.shape}")
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise DegeneracyError("no valid pixels for the flow loss")
    n = len(preds)
    total = None
    for i, pred in enumerate(preds, start=1):
        if pred.u.shape != gt.u.shape:
            raise ShapeError(f"prediction {pred.u.shape} vs gt {gt.u.shape}")
        l1 = ad.add(ad.tabs(ad.sub(pred.u, gt.u)), ad.tabs(ad.sub(pred.v, gt.v)))
        term = ad.scale(_masked_mean(l1, mask, n_valid), gamma ** (n - i))
        total = term if total is None else ad.add(total, term)
    return total


def silog_loss(pred: DepthMap, gt: DepthMap,
               lam: float = SILOG_LAMBDA_DEFAULT,
               alpha: float = SILOG_ALPHA_DEFAULT,
               valid: Optional[np.ndarray] = None) -> Tensor:
    """alpha * sqrt( mean(g^2) - lam * mean(g)^2 ), g = log pred - log gt.

    The argument is a variance-style quantity that is exactly zero for a
    perfect prediction, so the square root uses the zero-tolerant variant
    (value 0, subgradient 0 there).
    """
    mask = _resolve_valid(valid, gt.valid)
    if pred.d.shape != gt.d.shape or mask.shape != gt.d.shape:
        raise ShapeError(f"depth shapes differ: {pred.d.shape} vs {gt.d.shape}")
    idx = np.flatnonzero(mask.reshape(-1))
    if idx.size == 0:
        raise DegeneracyError("no valid pixels for the depth loss")
    if not np.all(gt.d.data.reshape(-1)[idx] > 0):
        raise DomainError("ground-truth depth must be positive on valid pixels")
    if not np.all(pred.d.data.reshape(-1)[idx] > 0):
        raise DomainError("predicted depth must be positive on valid pixels")
    g = ad.sub(ad.log(ad.gather_flat(pred.d, idx)), ad.log(ad.gather_flat(gt.d, idx)))
    mean_sq = ad.tmean(ad.mul(g, g))
    mean = ad.tmean(g)
    arg = ad.sub(mean_sq, ad.scale(ad.mul(mean, mean), lam))
    return ad.scale(ad.sqrt0(arg), alpha)


# ---------------------------------------------------------------------------
# metrics (plain numpy, reported as MetricReport)

def _epe(pred: FlowField, gt: FlowField) -> np.ndarray:
    if pred.u.shape != gt.u.shape:
        raise ShapeError(f"flow shapes differ: {pred.u.shape} vs {gt.u.shape}")
    return np.hypot(pred.u.data - gt.u.data, pred.v.data - gt.v.data)


def aepe(pred: FlowField, gt: FlowField,
         valid: Optional[np.ndarray] = None) -> MetricReport:
    """Average end-point error over valid pixels."""
    mask = _resolve_valid(valid, gt.valid)
    n = int(mask.sum())
    if n == 0:
        raise DegeneracyError("no valid pixels for AEPE")
    return MetricReport("aepe", float(_epe(pred, gt)[mask].mean()), n)


def fl_all(pred: FlowField, gt: FlowField,
           valid: Optional[np.ndarray] = None) -> MetricReport:
    """KITTI outlier rate: % of valid pixels with EPE > 3 px and > 5% of
    the ground-truth flow magnitude."""
    mask = _resolve_valid(valid, gt.valid)
    n = int(mask.sum())
    if n == 0:
        raise DegeneracyError("no valid pixels for Fl-all")
    epe = _epe(pred, gt)[mask]
    mag = np.hypot(gt.u.data, gt.v.data)[mask]
    outlier = (epe > 3.0) & (epe > 0.05 * mag)
    return MetricReport("fl_all", float(100.0 * outlier.mean()), n)


def depth_metrics(pred: DepthMap, gt: DepthMap,
                  valid: Optional[np.ndarray] = None) -> List[MetricReport]:
    """AbsRel, SqRel, RMSE over valid pixels."""
    mask = _resolve_valid(valid, gt.valid)
    n = int(mask.sum())
    if n == 0:
        raise DegeneracyError("no valid pixels for depth metrics")
    if pred.d.shape != gt.d.shape:
        raise ShapeError(f"depth shapes differ: {pred.d.shape} vs {gt.d.shape}")
    gtv = gt.d.data[mask]
    if not np.all(gtv > 0):
        raise DomainError("ground-truth depth must be positive on valid pixels")
    diff = pred.d.data[mask] - gtv
    return [
        MetricReport("absrel", float(np.mean(np.abs(diff) / gtv)), n),
        MetricReport("sqrel", float(np.mean(diff * diff / gtv)), n),
        MetricReport("rmse", float(np.sqrt(np.mean(diff * diff))), n),
    ]
