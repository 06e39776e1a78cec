"""Command-line entry points tying the pipeline together.

Subcommands: simulate, train, reconstruct, render, evaluate, curve. Every
failure exits nonzero with a single-line diagnostic on stderr; unknown
commands exit with status 2 and usage text.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import io
from .evaluation import period_error_ms, psnr3d, ssim_slices, volume_curve
from .gaussians import Volume, voxelize
from .model import deformed_at, render_at_time
from .phantom import default_phantom, generate_dataset, phantom_volume
from .training import desk_config, fit, paper_config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyntomo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a breathing-phantom dataset")
    p.add_argument("--config", help="simulate config file (key=value)")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="fit a model to a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="train config file (key=value)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--deterministic", action="store_true", help="single-threaded fixed-order reductions")
    p.add_argument("--threads", type=int, default=0, help="torch threads (0 = available parallelism)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("reconstruct", help="voxelize the deformed model at a time")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render one projection from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--angle", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="compare a checkpoint against the analytic phantom")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--phantom-config", help="eval config file (key=value)")
    p.add_argument("--out", required=True, help="output JSON report")

    p = sub.add_parser("curve", help="volume-time curve of the trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--t0", type=float, required=True)
    p.add_argument("--t1", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--threshold", type=float, default=0.15)
    p.add_argument("--out", required=True, help="output CSV (t,volume)")
    return parser


def _cmd_simulate(args) -> int:
    cfg = io.SimulateConfig()
    if args.config:
        cfg = io.simulate_config_from_text(Path(args.config).read_text(encoding="utf-8"))
    phantom = default_phantom(cfg.t_true)
    dataset = generate_dataset(phantom, cfg.geometry(), cfg.n_proj, cfg.duration, seed=cfg.seed)
    io.write_dataset(args.out, dataset)
    print(f"wrote {len(dataset)} projections to {args.out}")
    return 0


def _cmd_train(args) -> int:
    base = desk_config() if args.preset == "desk" else paper_config()
    config = base
    if args.config:
        config = io.train_config_from_text(Path(args.config).read_text(encoding="utf-8"), base=base)
    if args.deterministic:
        config = dataclasses.replace(config, deterministic=True)
    if args.threads > 0:
        torch.set_num_threads(args.threads)
    elif not config.deterministic:
        torch.set_num_threads(os.cpu_count() or 1)
    dataset = io.read_dataset(args.data)
    t0 = time.time()
    progress = None
    if not args.quiet:
        def progress(it, total, row):
            print(
                f"iter {it}/{total} total={row['total']:.5f} T_hat={row['T_hat']:.4f} "
                f"({time.time() - t0:.0f}s)",
                flush=True,
            )
    model, metrics = fit(dataset, config, progress=progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_checkpoint(out, model, config, dataset.geometry)
    io.write_metrics_csv(out.parent / "metrics.csv", metrics)
    print(f"wrote checkpoint {out} ({model.gaussians.count} kernels, {time.time() - t0:.0f}s)")
    return 0


def _cmd_reconstruct(args) -> int:
    model, _config, geometry, _ = io.read_checkpoint(args.ckpt)
    vol = voxelize(deformed_at(model, args.time), (args.res, geometry.scene_bounds))
    io.write_volume(args.out, vol)
    print(f"wrote {args.res}^3 volume to {args.out}")
    return 0


def _cmd_render(args) -> int:
    model, _config, geometry, _ = io.read_checkpoint(args.ckpt)
    with torch.no_grad():
        img = render_at_time(model, geometry, args.angle, args.time).cpu().numpy()
    io.write_image_raw(args.out, img)
    print(f"wrote {img.shape[1]}x{img.shape[0]} image to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    model, _config, geometry, _ = io.read_checkpoint(args.ckpt)
    dataset = io.read_dataset(args.data)
    cfg = io.EvalConfig()
    if args.phantom_config:
        cfg = io.eval_config_from_text(Path(args.phantom_config).read_text(encoding="utf-8"))
    true_period = dataset.true_period if dataset.true_period is not None else cfg.t_true
    phantom = default_phantom(true_period)
    bounds = geometry.scene_bounds
    times = (np.arange(cfg.n_times) + 0.5) * (true_period / cfg.n_times)
    psnrs, ssims = [], []
    for t in times:
        gt = phantom_volume(phantom, cfg.eval_res, bounds, float(t))
        rec = voxelize(deformed_at(model, float(t)), (cfg.eval_res, bounds))
        psnrs.append(psnr3d(rec.data, gt))
        ssims.append(ssim_slices(rec.data, gt))
    t_hat = float(torch.exp(model.period.tau_hat.detach()))
    report = {
        "psnr_db": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "period_error_ms": period_error_ms(t_hat, true_period),
        "t_hat_s": t_hat,
        "t_true_s": float(true_period),
        "eval_res": cfg.eval_res,
        "n_times": cfg.n_times,
        "psnr_per_time": [float(v) for v in psnrs],
    }
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"psnr_db={report['psnr_db']:.2f} ssim={report['ssim']:.4f} period_error_ms={report['period_error_ms']:.1f}")
    return 0


def _cmd_curve(args) -> int:
    model, _config, geometry, _ = io.read_checkpoint(args.ckpt)
    times = np.arange(args.t0, args.t1 + args.dt / 2, args.dt)
    curve = volume_curve(model, times, (args.res, geometry.scene_bounds), threshold=args.threshold)
    lines = ["t,volume"] + [f"{t!r},{v!r}" for t, v in curve]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(curve)} curve samples to {args.out}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "reconstruct": _cmd_reconstruct,
    "render": _cmd_render,
    "evaluate": _cmd_evaluate,
    "curve": _cmd_curve,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"dyntomo {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
