"""``vaeslmc`` command line: run, verify-iso, bench, train-init, calibrate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DimensionError, VaeSlmcError
from ..rng import stream
from ..vae import isometric_factor, latent_importance, load_model
from . import bench, config, io, runner


def iso_table(model, n_samples=10000, delta=1e-3, seed=0):
    """Rows ``(m, kappa_m, Iso_m)`` sorted by importance, most important first."""
    samples = model.sample(n_samples, stream(seed, "verify-iso"))
    iso = isometric_factor(model, samples, delta)
    kappa = latent_importance(model, samples)
    order = np.argsort(-kappa, kind="stable")
    return [(int(m) + 1, float(kappa[m]), float(iso[m])) for m in order]


def _cmd_run(args):
    cfg = config.load_config(args.config)
    report = runner.run(cfg, args.output)
    agg = report.summary.get("aggregate", {})
    for key, v in sorted(agg.items()):
        print(f"{key}: {v['mean']:.6g} +- {v['std']:.3g}")
    print(f"wrote {Path(report.files['summary']).parent}")
    return 0


def _cmd_verify_iso(args):
    model = load_model(args.model)
    if args.dim is not None and model.dim != args.dim:
        raise DimensionError(f"checkpoint has D={model.dim}, expected {args.dim}")
    rows = iso_table(model, args.samples, args.delta, args.seed)
    print(f"{'m':>4}  {'kappa':>12}  {'Iso':>8}")
    for m, k, iso in rows:
        print(f"{m:>4}  {k:>12.6g}  {iso:>8.4f}")
    if args.output:
        io.write_rows(args.output, ["latent_dim", "importance", "iso_factor"], rows)
    return 0


def _cmd_bench(args):
    table = bench.run_suite(args.suite, args.output, seed=args.seed, chains=args.chains, steps=args.steps,
                            scale=args.scale)
    print(bench.format_table(table))
    return 0


def _cmd_train_init(args):
    summary = runner.train_initial(config.load_config(args.config), args.output)
    for j, loss in enumerate(summary["train_loss"]):
        print(f"chain {j}: loss {loss['initial']:.6g} -> {loss['final']:.6g}")
    return 0


def _cmd_calibrate(args):
    calib = runner.run_calibration(config.load_config(args.config), args.output)
    for key, v in sorted(calib.items()):
        if not key.endswith("history"):
            print(f"{key}: {v}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="vaeslmc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one configured experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--output", help="output directory (default: config output_dir)")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("verify-iso", help="isometric factors of a saved model")
    v.add_argument("--model", required=True, help="checkpoint directory")
    v.add_argument("--samples", type=int, default=100000)
    v.add_argument("--delta", type=float, default=1e-3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--dim", type=int, help="expected input dimension")
    v.add_argument("--output", help="optional CSV path")
    v.set_defaults(func=_cmd_verify_iso)

    b = sub.add_parser("bench", help="run a benchmark suite")
    b.add_argument("--suite", required=True, choices=bench.SUITES)
    b.add_argument("--output", default="bench-output")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--chains", type=int, default=10)
    b.add_argument("--steps", type=int, default=50000)
    b.add_argument("--scale", type=float, default=1.0, help="shrink data/epoch counts for quick runs")
    b.set_defaults(func=_cmd_bench)

    t = sub.add_parser("train-init", help="draw initial data and train the initial model")
    t.add_argument("--config", required=True)
    t.add_argument("--output", required=True)
    t.set_defaults(func=_cmd_train_init)

    c = sub.add_parser("calibrate", help="tune baseline kernels for a config")
    c.add_argument("--config", required=True)
    c.add_argument("--output")
    c.set_defaults(func=_cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (VaeSlmcError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
