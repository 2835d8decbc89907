"""Manifest evaluation: model metrics plus the trivial reference baselines.

Per-sample metrics are averaged with equal sample weight; the report's
n_valid carries the total pixel count.  Baselines: the zero-flow
predictor, and the constant mean-depth predictor (mean ground-truth
depth over the evaluated samples).
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetManifest, Sample
from .errors import TaskError
from .heads import DepthMap, FlowField
from .losses import MetricReport, aepe, depth_metrics, fl_all


def _aggregate(per_sample: List[List[MetricReport]], suffix: str = ""
               ) -> List[MetricReport]:
    names = [r.name for r in per_sample[0]]
    out = []
    for i, name in enumerate(names):
        vals = [reports[i].value for reports in per_sample]
        n = sum(reports[i].n_valid for reports in per_sample)
        out.append(MetricReport(name + suffix, float(np.mean(vals)), n))
    return out


def eval_flow(predict: Callable[[Sample], FlowField], manifest: DatasetManifest,
              limit: Optional[int] = None, suffix: str = "") -> List[MetricReport]:
    if manifest.kind != "flow":
        raise TaskError(f"flow evaluation on a {manifest.kind!r} manifest")
    count = manifest.count if limit is None else min(limit, manifest.count)
    per_sample = []
    with ad.no_grad():
        for i in range(count):
            s = manifest.sample(i)
            pred = predict(s)
            per_sample.append([aepe(pred, s.gt_flow), fl_all(pred, s.gt_flow)])
    return _aggregate(per_sample, suffix)


def eval_depth(predict: Callable[[Sample], DepthMap], manifest: DatasetManifest,
               limit: Optional[int] = None, suffix: str = "") -> List[MetricReport]:
    if manifest.kind != "depth":
        raise TaskError(f"depth evaluation on a {manifest.kind!r} manifest")
    count = manifest.count if limit is None else min(limit, manifest.count)
    per_sample = []
    with ad.no_grad():
        for i in range(count):
            s = manifest.sample(i)
            pred = predict(s)
            per_sample.append(depth_metrics(pred, s.gt_depth))
    return _aggregate(per_sample, suffix)


# ---------------------------------------------------------------------------
# trivial baselines

def zero_flow_predictor(sample: Sample) -> FlowField:
    shape = sample.gt_flow.u.shape
    zero = np.zeros(shape, dtype=np.float32)
    return FlowField(Tensor(zero), Tensor(zero.copy()),
                     np.ones(shape, dtype=bool))


def mean_depth_of(manifest: DatasetManifest, limit: Optional[int] = None) -> float:
    count = manifest.count if limit is None else min(limit, manifest.count)
    means = [float(manifest.sample(i).gt_depth.d.data.mean()) for i in range(count)]
    return float(np.mean(means))


def constant_depth_predictor(value: float) -> Callable[[Sample], DepthMap]:
    def predict(sample: Sample) -> DepthMap:
        shape = sample.gt_depth.d.shape
        return DepthMap(Tensor(np.full(shape, value, dtype=np.float32)),
                        np.ones(shape, dtype=bool))

    return predict


def model_flow_predictor(model) -> Callable[[Sample], FlowField]:
    def predict(sample: Sample) -> FlowField:
        return model.predict_flow(sample.frame1, sample.frame2)[-1]

    return predict


def model_depth_predictor(model) -> Callable[[Sample], DepthMap]:
    def predict(sample: Sample) -> DepthMap:
        return model.predict_depth(sample.frame1)[-1]

    return predict


def evaluate_with_baselines(model, manifest: DatasetManifest,
                            limit: Optional[int] = None) -> List[MetricReport]:
    """Model metrics followed by the task's trivial baseline metrics."""
    if manifest.kind == "flow":
        reports = eval_flow(model_flow_predictor(model), manifest, limit)
        reports += eval_flow(zero_flow_predictor, manifest, limit,
                             suffix="_zero_baseline")
    else:
        reports = eval_depth(model_depth_predictor(model), manifest, limit)
        mean_d = mean_depth_of(manifest, limit)
        reports += eval_depth(constant_depth_predictor(mean_d), manifest, limit,
                              suffix="_mean_baseline")
    return reports
