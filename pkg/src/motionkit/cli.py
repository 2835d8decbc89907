"""Command-line interface.

    motionkit train --config <path>
    motionkit eval  --ckpt <path> --data <manifest>
    motionkit infer --ckpt <path> --in1 <img> [--in2 <img>] --out <prefix>
    motionkit check

Exit codes: 0 success, 1 check/eval/runtime failure, 2 usage or config
error.  Images for infer are binary PGM/PPM; predictions are written as
.flo (flow) or .pfm (depth) plus a .ppm/.pgm visualization.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checks
from .autodiff import Tensor
from .checkpoint import build_model_from_checkpoint
from .config import load_config
from .data import (flow_to_color, load_manifest, read_ppm, write_flo,
                   write_pfm, write_ppm)
from .errors import ConfigError, MotionKitError, TrainingDivergedError
from .evaluate import evaluate_with_baselines
from .tokenizer import make_image
from .train import run_training

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    cfg = load_config(cfg_path)
    result = run_training(cfg, base_dir=cfg_path.parent, progress=print)
    print(f"checkpoint: {result.ckpt_path}")
    print(f"log: {result.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = build_model_from_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    if manifest.kind == "flow" and model.flow_head is None:
        raise ConfigError(f"checkpoint task {model.task!r} cannot run a flow manifest")
    if manifest.kind == "depth" and model.depth_head is None:
        raise ConfigError(f"checkpoint task {model.task!r} cannot run a depth manifest")
    if manifest.size != model.cfg.image_size:
        raise ConfigError(
            f"manifest size {manifest.size} does not match model "
            f"image size {model.cfg.image_size}")
    for report in evaluate_with_baselines(model, manifest, limit=args.limit):
        print(report.line())
    return EXIT_OK


def cmd_infer(args) -> int:
    model = build_model_from_checkpoint(args.ckpt)
    img1 = read_ppm(args.in1)
    out_prefix = Path(args.out)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    if model.task in ("flow", "joint") and model.flow_head is not None:
        if args.in2 is None:
            print("error: flow inference needs --in2 <second frame>",
                  file=sys.stderr)
            return EXIT_USAGE
        img2 = read_ppm(args.in2)
        flow = model.predict_flow(img1, img2)[-1]
        write_flo(f"{out_prefix}.flo", flow)
        # 1 px magnitude floor so near-zero flow renders near-white instead
        # of normalizing sub-pixel noise to full saturation
        mag = float(np.hypot(flow.u.data, flow.v.data).max())
        write_ppm(f"{out_prefix}.ppm", flow_to_color(flow, max_mag=max(mag, 1.0)))
        print(f"wrote {out_prefix}.flo and {out_prefix}.ppm")
    else:
        depth = model.predict_depth(img1)[-1]
        write_pfm(f"{out_prefix}.pfm", depth)
        d = depth.d.data
        lo, hi = float(d.min()), float(d.max())
        norm = (d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)
        write_ppm(f"{out_prefix}.pgm", make_image(norm.astype(np.float32)))
        print(f"wrote {out_prefix}.pfm and {out_prefix}.pgm")
    return EXIT_OK


def cmd_check(args) -> int:
    results = checks.run_all(perturb_sinkhorn=args.negative_control)
    any_failed = False
    for res in results:
        status = "ok" if res.failed == 0 else "FAILED"
        print(f"{res.name}: {res.passed}/{res.passed + res.failed} passed [{status}]")
        for detail in res.details[:5]:
            print(f"  - {detail}")
        any_failed = any_failed or res.failed > 0
    print("CHECK FAILED" if any_failed else "CHECK OK")
    return EXIT_FAILURE if any_failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motionkit",
        description="Unified optical flow and depth at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--limit", type=int, default=None,
                        help="evaluate at most this many samples")
    p_eval.set_defaults(fn=cmd_eval)

    p_infer = sub.add_parser("infer", help="run one prediction on image files")
    p_infer.add_argument("--ckpt", required=True)
    p_infer.add_argument("--in1", required=True)
    p_infer.add_argument("--in2", default=None)
    p_infer.add_argument("--out", required=True)
    p_infer.set_defaults(fn=cmd_infer)

    p_check = sub.add_parser("check", help="run the property verification suite")
    p_check.add_argument("--negative-control", action="store_true",
                         help="self-test hook: break sinkhorn column scaling "
                              "and expect the marginal check to fail")
    p_check.set_defaults(fn=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except MotionKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
