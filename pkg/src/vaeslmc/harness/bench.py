"""Benchmark suites producing mean +- std tables over independent chains."""

from __future__ import annotations

import copy
import math
from pathlib import Path

import numpy as np

from . import io
from .runner import run

SUITES = ("naive-ess", "gmm-rmse", "optimization", "spectral", "sensor")

# Per-target VAE and annealing settings (full-scale defaults).
_TOY_BETA_VAE = {"ICG": 6.0, "SCG": 6.0, "BANANA": 1 / 20, "RW": 1 / 20}
_OPT = [
    ("Himmelblau", 2, 1 / 200, 516, 50.0),
    ("Rastrigin", 2, 1 / 300, 1024, 50.0),
    ("Rastrigin", 10, 1 / 300, 1024, 50.0),
    ("StyblinskiTang", 2, 1 / 200, 516, 50.0),
    ("StyblinskiTang", 10, 1 / 30, 516, 50.0),
]


def _base(seed, method, target, steps, chains, **extra):
    cfg = {"version": 1, "seed": seed, "method": method, "target": target, "steps": steps, "chains": chains}
    cfg.update(extra)
    return cfg


def suite_configs(name, seed=0, chains=10, steps=50000, scale=1.0):
    """``[(row_label, method, config)]`` for a suite.

    ``scale`` multiplies sample, epoch and training-set counts for quick runs;
    1.0 is the full-size setting.
    """
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")

    def n(v, lo=1):
        return max(lo, int(round(v * scale)))

    train = {"epochs": n(150), "batch_size": 516}
    rows = []
    if name == "naive-ess":
        for toy, bvae in _TOY_BETA_VAE.items():
            spec = {"name": "toy", "toy": toy}
            if toy == "ICG":
                spec["dim"] = 100
            rows.append((toy, "HMC", _base(seed, "HMC", spec, steps, chains,
                                           kernel={"hmc_leapfrog_steps": 10, "tune_steps": n(4000, 100)})))
            rows.append((toy, "VAE-SLMC", _base(seed, "VAE-SLMC", spec, steps, chains,
                                                init={"sampler": "exact", "n_samples": n(20000, 100)},
                                                train={**train, "beta_vae": bvae})))
    elif name == "gmm-rmse":
        for clusters in (2, 3, 4, 5):
            for dim in (2, 10):
                spec = {"name": "gmm", "clusters": clusters, "dim": dim}
                label = f"GMM-{clusters} D={dim}"
                rows.append((label, "MH", _base(seed, "MH", spec, steps, chains)))
                rows.append((label, "AA-VAE-SLMC", _base(
                    seed, "AA-VAE-SLMC", spec, steps, chains, initial_state=[5.0] * dim,
                    init={"n_samples": n(40000, 100)}, anneal={"n_train": n(15000, 100)},
                    train={**train, "beta_vae": 1 / 120})))
    elif name == "optimization":
        for problem, dim, bvae, batch, beta_k in _OPT:
            spec = {"name": "optimization", "problem": problem, "dim": dim}
            label = f"{problem} D={dim}"
            rows.append((label, "AA-VAE-SLMC", _base(
                seed, "AA-VAE-SLMC", spec, steps, chains,
                init={"n_samples": n(40000, 100)},
                anneal={"beta0": 0.1, "beta_final": beta_k, "n_train": n(15000, 100)},
                train={"epochs": train["epochs"], "batch_size": batch, "beta_vae": bvae})))
    elif name == "spectral":
        spec = {"name": "spectral"}
        rows.append(("spectral", "MH-EMC", _base(seed, "MH-EMC", spec, steps, chains)))
        rows.append(("spectral", "AA-VAE-ESLMC", _base(
            seed, "AA-VAE-ESLMC", spec, steps, chains, init={"n_samples": n(40000, 100)},
            anneal={"n_train": n(15000, 100)}, train={**train, "beta_vae": 1 / 1000})))
    else:
        spec = {"name": "sensor"}
        rows.append(("sensor", "MH-EMC", _base(seed, "MH-EMC", spec, steps, chains)))
        rows.append(("sensor", "AA-VAE-ESLMC", _base(
            seed, "AA-VAE-ESLMC", spec, steps, chains, init={"n_samples": n(40000, 100)},
            anneal={"beta0": 0.05, "n_train": n(15000, 100)}, parallel={"betas0": [0.05, 0.1]},
            train={**train, "beta_vae": 1 / 600})))
    return rows


_METRICS = {"naive-ess": "ess", "gmm-rmse": "rmse", "optimization": "rmse_opt", "spectral": "rem", "sensor": "rmse"}


def aggregate(values):
    """``(mean, std)`` with the population std (0 for a single chain)."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def run_suite(name, output_dir, seed=0, chains=10, steps=50000, scale=1.0, overrides=None):
    """Run every row of a suite; writes ``<suite>.csv`` and returns the table rows."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric = _METRICS[name]
    table = []
    for i, (label, method, cfg) in enumerate(suite_configs(name, seed, chains, steps, scale)):
        if overrides:
            cfg = _merge(cfg, overrides)
        report = run(cfg, out / f"{i:02d}_{method}_{label.replace(' ', '_').replace('=', '')}")
        vals = [c.get(metric) for c in report.summary["chains"]]
        mean, std = aggregate(vals)
        ar_mean, _ = aggregate([c["acceptance_rate"] for c in report.summary["chains"]])
        table.append([label, method, metric, mean, std, ar_mean, len(vals)])
    io.write_rows(out / f"{name}.csv", ["target", "method", "metric", "mean", "std", "acceptance_rate", "chains"],
                  table)
    return table


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def format_table(table) -> str:
    lines = [f"{'target':<22}{'method':<15}{'metric':<10}{'mean':>14}  {'std':>12}"]
    for label, method, metric, mean, std, *_ in table:
        lines.append(f"{label:<22}{method:<15}{metric:<10}{mean:>14.6g}  {std:>12.4g}")
    return "\n".join(lines)
