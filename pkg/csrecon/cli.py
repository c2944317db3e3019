"""Command-line entry points.

    python -m csrecon gen-matrix --block 8 --ratio 0.25 --seed 0 --out A.rcsa
    python -m csrecon measure --matrix A.rcsa --in img.pgm --out img.rcsm
    python -m csrecon reconstruct --ckpt runs/toy/model.rcsc --meas img.rcsm --out rec.pgm
    python -m csrecon train --config configs/toy.cfg [--preset no-inj]
    python -m csrecon eval --dir images/ --ckpt runs/toy/model.rcsc --baseline
    python -m csrecon bench-mem --config configs/toy.cfg --tmax 12
    python -m csrecon audit-grad --config configs/toy.cfg

Errors are reported as one JSON line on stderr; the exit status is 2 for
expected failures and 1 for anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import PRESETS, apply_preset, build_config, load_config
from .cs_operator import (
    build_operator,
    load_measurement,
    load_operator,
    sample,
    save_measurement,
    save_operator,
    verify_operator,
)
from .datasets import load_image_dir
from .engine import Rng, Tensor, no_grad, precision
from .errors import ConfigError, ReconError
from .metrics import EVAL_MODES, evaluate
from .netpbm import read_image, write_image
from .sampler import identity_framework
from .schemas import TrainConfig
from .trainer import SWEEP_STEPS, grad_equivalence_audit, load_model, memory_sweep, parameter_summary, train

logger = logging.getLogger("csrecon")

LOG_LEVEL_ENV = "CSRECON_LOG_LEVEL"


def _emit_json(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=False))


def _config_or_default(path: Optional[str], preset: Optional[str] = None) -> TrainConfig:
    if path:
        return load_config(path, preset)
    config = build_config({}, "defaults")
    if preset:
        config = apply_preset(config, preset)
    return config


# ==================== commands ====================

def cmd_gen_matrix(args: argparse.Namespace) -> int:
    op = build_operator(args.block, args.ratio, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_operator(out, op)
    report = {"path": str(out), "block": op.block, "ratio": op.ratio, "seed": op.seed, "M": op.m, "N": op.n}
    if args.verify:
        report["max_gram_deviation"] = verify_operator(load_operator(out))
    logger.info("matrix %dx%d written to %s", op.m, op.n, out)
    _emit_json(report)
    return 0


def cmd_measure(args: argparse.Namespace) -> int:
    op = load_operator(args.matrix)
    image = read_image(args.input)
    y = sample(op, Tensor(image))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_measurement(out, y)
    logger.info("%s: %d tiles x %d measurements -> %s", args.input, y.values.shape[1], op.m, out)
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    y = load_measurement(args.meas)
    op = load_operator(args.matrix) if args.matrix else build_operator(y.block, y.ratio, y.seed)
    if args.identity:
        framework = identity_framework(image_channels=y.shape[0], steps=1)
        init, seed = "backproj", 0
    else:
        model, iteration = load_model(args.ckpt)
        framework, init, seed = model.framework, model.config.init, model.config.seed
        if not np.isclose(op.ratio, model.config.ratio):
            logger.warning("operator ratio %.4g differs from training ratio %.4g", op.ratio, model.config.ratio)
        logger.info("checkpoint %s (iteration %d)", args.ckpt, iteration)
    with precision(framework.w_T.dtype.type), no_grad():
        result = framework.reconstruct(op, y, init=init, rng=Rng(seed).derive("reconstruct"))
    write_image(args.out, np.clip(result.image.data, 0.0, 1.0))
    logger.info("reconstructed %s in %.3fs (%d NFE) -> %s", args.meas, result.seconds, result.nfe, args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_or_default(args.config, args.preset)
    overrides = {k: v for k, v in (("out_dir", args.out_dir), ("workers", args.workers),
                                   ("iterations", args.iterations)) if v is not None}
    if overrides:
        config = build_config({**config.model_dump(), **overrides}, "command line")
    result = train(config)
    _emit_json({
        "checkpoint": str(result.checkpoint_path),
        "log": str(result.log_path),
        "iterations": result.iterations,
        "final_loss": result.losses[-1] if result.losses else None,
        "val_psnr": result.final_psnr,
        "baseline_psnr": result.baseline_psnr,
    })
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.identity:
        if not args.matrix:
            raise ConfigError("eval --identity needs --matrix")
        channels = args.channels
        framework = identity_framework(image_channels=channels, steps=1)
        init, seed = "backproj", 0
        op = load_operator(args.matrix)
    else:
        model, _ = load_model(args.ckpt)
        framework, channels = model.framework, model.config.image_channels
        init, seed = model.config.init, model.config.seed
        summary = parameter_summary(model)
        logger.info("estimator %d params (injectors %.2f%%)", summary["estimator_parameters"],
                    100 * summary["injector_ratio"])
        op = load_operator(args.matrix) if args.matrix else model.operator
        if not np.isclose(op.ratio, model.config.ratio):
            logger.warning("evaluating at ratio %.4g, trained at %.4g", op.ratio, model.config.ratio)
    names, images = load_image_dir(args.dir, channels)
    with precision(framework.w_T.dtype.type):
        report = evaluate(framework, op, names, images, mode=args.mode, baseline=args.baseline,
                          workers=args.workers, save_dir=args.save_dir, init=init, seed=seed)
    print(report.format_table())
    if args.csv:
        report.write_csv(args.csv)
    if args.xlsx:
        report.write_xlsx(args.xlsx)
    return 0


def cmd_bench_mem(args: argparse.Namespace) -> int:
    config = _config_or_default(args.config)
    steps = [t for t in SWEEP_STEPS if t <= args.tmax]
    if not steps:
        raise ConfigError(f"--tmax {args.tmax} leaves no step count to measure")
    report = memory_sweep(config, steps, wiring_levels=args.wiring_levels)
    print("T,cached_peak_bytes,recompute_peak_bytes,reduction_pct")
    for row in report.rows:
        print(f"{row.T},{row.cached_peak_bytes},{row.recompute_peak_bytes},{row.reduction_pct:.2f}")
    logger.info("cached fit: %.0f B/step + %.0f B (R^2 %.4f); recompute spread %.2f%%",
                report.slope, report.intercept, report.r_squared, report.recompute_spread_pct)
    if args.json:
        Path(args.json).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return 0


def cmd_audit_grad(args: argparse.Namespace) -> int:
    config = _config_or_default(args.config)
    config = build_config({**config.model_dump(), "precision": args.precision,
                           **({"steps": args.steps} if args.steps else {})}, "audit-grad")
    report = grad_equivalence_audit(config)
    print(report.model_dump_json())
    return 0 if report.passed else 1


# ==================== parser ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csrecon", description="Invertible diffusion compressed-sensing toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=os.environ.get(LOG_LEVEL_ENV, "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-matrix", help="build and save a block sampling matrix (RCSA)")
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--verify", action="store_true", help="check A A^T = I on the written file")
    p.set_defaults(func=cmd_gen_matrix)

    p = sub.add_parser("measure", help="measure an image with a saved matrix (RCSM)")
    p.add_argument("--matrix", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("reconstruct", help="reconstruct an image from its measurements")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt")
    source.add_argument("--identity", action="store_true", help="untrained zero-output estimator, unwired")
    p.add_argument("--meas", required=True)
    p.add_argument("--matrix", help="use this RCSA file instead of rebuilding A from the measurement header")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train end-to-end and write model.rcsc + train_log.csv")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM over a directory of PGM/PPM images")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt")
    source.add_argument("--identity", action="store_true")
    p.add_argument("--dir", required=True)
    p.add_argument("--matrix")
    p.add_argument("--channels", type=int, default=1, choices=[1, 3], help="image channels for --identity")
    p.add_argument("--mode", choices=EVAL_MODES, default="luma")
    p.add_argument("--baseline", action="store_true", help="also score the back-projection A^T y")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv")
    p.add_argument("--xlsx")
    p.add_argument("--save-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-mem", help="peak activation bytes per T, cached vs recompute (CSV)")
    p.add_argument("--config")
    p.add_argument("--tmax", type=int, default=12)
    p.add_argument("--wiring-levels", type=int, choices=[1, 2])
    p.add_argument("--json", help="also write the full sweep report here")
    p.set_defaults(func=cmd_bench_mem)

    p = sub.add_parser("audit-grad", help="compare cached and recompute gradients")
    p.add_argument("--config")
    p.add_argument("--precision", choices=["float32", "float64"], default="float64")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_audit_grad)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(list(argv) if argv is not None else None)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ReconError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover
        logger.debug("unexpected failure", exc_info=True)
        print(json.dumps({"error": "internal", "detail": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
