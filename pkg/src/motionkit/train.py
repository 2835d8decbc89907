"""Deterministic training loop: AdamW + one-cycle LR + Stiefel re-projection.

(config, seed) fully determine the run: parameters initialize from a
Philox stream keyed by the seed, batches walk the manifest in a fixed
order, and all math is single-threaded numpy, so metric logs and
checkpoints reproduce bitwise on one platform.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .checkpoint import save_model_checkpoint
from .config import Config
from .data import DatasetManifest, load_manifest
from .errors import ConfigError, TaskError, TrainingDivergedError
from .evaluate import (eval_depth, eval_flow, model_depth_predictor,
                       model_flow_predictor)
from .losses import JOINT_SILOG_WEIGHT, sequence_l1_loss, silog_loss
from .model import ModelConfig, MotionModel
from .optim import SCHEDULES, AdamW, clip_grad_norm_

GRAD_CLIP_NORM = 1.0


@dataclass
class TrainResult:
    ckpt_path: str
    log_path: str
    steps_run: int
    final_metrics: Dict[str, float] = field(default_factory=dict)


def _resolve_manifest(path_str: str, base: Optional[Path]) -> DatasetManifest:
    p = Path(path_str)
    if not p.is_absolute() and base is not None and not p.exists():
        p = base / p
    return load_manifest(p)


def _flow_loss(model: MotionModel, sample, gamma: float):
    preds = model.predict_flow(sample.frame1, sample.frame2)
    return sequence_l1_loss(preds, sample.gt_flow, gamma=gamma)


def _depth_loss(model: MotionModel, sample, gamma: float, lam: float, alpha: float):
    preds = model.predict_depth(sample.frame1)
    total = None
    n = len(preds)
    for i, pred in enumerate(preds, start=1):
        term = ad.scale(silog_loss(pred, sample.gt_depth, lam=lam, alpha=alpha),
                        gamma ** (n - i))
        total = term if total is None else ad.add(total, term)
    return total


def run_training(cfg: Config, base_dir: Optional[Path] = None,
                 progress=None) -> TrainResult:
    """Train per config; writes metrics.log and model.ckpt under out_dir."""
    cfg.validate()
    tr = cfg.train
    out_dir = Path(cfg.out_dir)
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.task == "joint":
        train_sets = {
            "flow": _resolve_manifest(cfg.data.train_manifest_flow, base_dir),
            "depth": _resolve_manifest(cfg.data.train_manifest_depth, base_dir),
        }
        val_sets = {
            "flow": _resolve_manifest(cfg.data.val_manifest_flow, base_dir),
            "depth": _resolve_manifest(cfg.data.val_manifest_depth, base_dir),
        }
    else:
        train_sets = {cfg.task: _resolve_manifest(cfg.data.train_manifest, base_dir)}
        val_sets = {cfg.task: _resolve_manifest(cfg.data.val_manifest, base_dir)}

    sizes = {m.size for m in list(train_sets.values()) + list(val_sets.values())}
    if len(sizes) != 1:
        raise ConfigError(f"manifest image sizes differ: {sorted(sizes)}")
    cfg.model.image_size = sizes.pop()
    for name, m in train_sets.items():
        if m.kind != name:
            raise TaskError(f"train manifest for {name} has kind {m.kind!r}")
    for name, m in val_sets.items():
        if m.kind != name:
            raise TaskError(f"val manifest for {name} has kind {m.kind!r}")

    model = MotionModel(cfg.model.validate(), task=cfg.task,
                        rng=np.random.Generator(np.random.Philox(
                            key=np.array([tr.seed, 0xA11CE], dtype=np.uint64))))
    params = model.named_parameters()
    opt = AdamW(params, lr=tr.lr_max)
    schedule = SCHEDULES[tr.schedule]

    log_path = out_dir / "metrics.log"
    ckpt_path = out_dir / "model.ckpt"
    lines: List[str] = []

    def log(text: str):
        lines.append(text)
        if progress is not None:
            progress(text)

    def run_validation() -> Dict[str, float]:
        metrics: Dict[str, float] = {}
        for name, m in val_sets.items():
            limit = min(tr.val_samples, m.count)
            if name == "flow":
                reps = eval_flow(model_flow_predictor(model), m, limit=limit)
                metrics["val_aepe"] = reps[0].value
            else:
                reps = eval_depth(model_depth_predictor(model), m, limit=limit)
                metrics["val_absrel"] = reps[0].value
        return metrics

    def batch_loss(step: int):
        total = None
        per_task = {}
        for task, manifest in train_sets.items():
            weight = JOINT_SILOG_WEIGHT if (cfg.task == "joint" and task == "depth") else 1.0
            n_task = tr.batch if cfg.task != "joint" else max(1, tr.batch // 2)
            task_total = None
            for b in range(n_task):
                idx = (step * n_task + b) % manifest.count
                sample = manifest.sample(idx)
                if task == "flow":
                    loss = _flow_loss(model, sample, tr.gamma)
                else:
                    loss = _depth_loss(model, sample, tr.gamma,
                                       tr.silog_lambda, tr.silog_alpha)
                task_total = loss if task_total is None else ad.add(task_total, loss)
            task_mean = ad.scale(task_total, 1.0 / n_task)
            per_task[task] = float(task_mean.data)
            weighted = ad.scale(task_mean, weight) if weight != 1.0 else task_mean
            total = weighted if total is None else ad.add(total, weighted)
        return total, per_task

    t0 = time.time()
    steps_run = 0
    for step in range(tr.steps):
        lr = schedule(step, tr.steps, tr.lr_max)
        loss, per_task = batch_loss(step)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            parts = " ".join(f"{k}={v:.6f}" for k, v in per_task.items())
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: total={loss_val} {parts}")
        ad.backward(loss)
        clip_grad_norm_(params.values(), GRAD_CLIP_NORM)
        opt.step(lr)
        opt.zero_grad()
        model.reorthonormalize()
        steps_run = step + 1
        if step % tr.log_every == 0 or step == tr.steps - 1:
            extra = ""
            if tr.val_every and (step % tr.val_every == 0 or step == tr.steps - 1):
                extra = "".join(f" {k} {v:.6f}" for k, v in
                                sorted(run_validation().items()))
            log(f"step {step} lr {lr:.8f} loss {loss_val:.6f} "
                f"ortho {model.orthonormality_defect():.3e}{extra}")

    final_metrics = run_validation() if tr.steps > 0 else {}
    save_model_checkpoint(ckpt_path, model)
    log(f"done steps {steps_run} elapsed {time.time() - t0:.1f}s "
        f"ckpt {ckpt_path.name}")
    # elapsed wall time would break byte-identical logs across reruns, so the
    # persisted file carries everything except that final line
    log_path.write_text("\n".join(lines[:-1]) + "\n" if len(lines) > 1 else "")
    return TrainResult(ckpt_path=str(ckpt_path), log_path=str(log_path),
                       steps_run=steps_run, final_metrics=final_metrics)
