"""Experiment runner: init data, calibration, annealing, measurement, reports.

All randomness is drawn from named streams of the single run seed:
``init-data``, ``calibrate``, ``training/k/j``, ``chain/k/j``, ``search/k/j``
and ``measure/c`` for measurement chain ``c``.  Measurement chains run
independently and may be spread over worker processes (``VAESLMC_WORKERS``);
because each chain owns its stream, outputs do not depend on the worker count.
"""

from __future__ import annotations

import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import metrics
from .. import rng as rngmod
from ..annealing import (
    AnnealResult,
    make_training_data,
    run_adaptive_annealing,
    run_constant_annealing,
    run_parallel_annealing,
)
from ..kernels import run_emc, run_hmc, run_mh, run_slmc, tune_hmc_step, tune_ladder, tune_rw_sigma
from ..targets import build_target, temper
from ..vae import build_vae, save_model, train
from . import config as cfgmod
from . import io

logger = logging.getLogger(__name__)

WORKERS_ENV = "VAESLMC_WORKERS"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def map_chains(fn, jobs, workers=None):
    """``[fn(*job) for job in jobs]``, optionally on a process pool (order preserved)."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


@dataclass
class RunReport:
    """What a run produced.  ``files`` maps logical names to written paths."""

    config: dict
    method: str
    chains: list
    summary: dict
    files: dict = field(default_factory=dict)
    anneal: AnnealResult | None = None
    calibration: dict = field(default_factory=dict)


def default_initial_state(target):
    if target.spec.get("name") == "gmm":
        return np.full(target.dim, 5.0)
    if target.bounds is not None:
        lo, hi = target.bounds
        return 0.5 * (lo + hi)
    return np.zeros(target.dim)


def initial_starts(target, x0, n, rng):
    """Starting points of ``n`` initial-data chains.

    The first chain starts at ``x0``.  The others start uniformly on the box
    of a bounded target and at ``x0`` plus unit Gaussian noise otherwise.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if n == 1:
        return [x0]
    if target.bounds is not None:
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), x0.shape) for b in target.bounds)
        rest = lo + (hi - lo) * rng.uniform(size=(n - 1, x0.size))
    else:
        rest = x0 + rng.standard_normal((n - 1, x0.size))
    return [x0, *rest]


def measurement_beta(cfg):
    if cfg["method"] in cfgmod.ANNEALED:
        return float(cfg["anneal"]["beta_final"])
    return float(cfg.get("beta", 1.0))


# --- chain workers (module level so they pickle) -----------------------------


def _mh_chain(spec, beta, x0, sigma, steps, seed, c):
    t = temper(build_target(spec), beta)
    r = run_mh(t, x0, sigma, steps, rngmod.stream(seed, "measure", c))
    return r.samples, r.log_p, r.n_accept


def _hmc_chain(spec, beta, x0, eps, n_leapfrog, steps, seed, c):
    t = temper(build_target(spec), beta)
    r = run_hmc(t, x0, eps, n_leapfrog, steps, rngmod.stream(seed, "measure", c))
    return r.samples, r.log_p, r.n_accept


def _emc_chain(spec, betas, x0, kernel, sigmas, eps, n_leapfrog, steps, seed, c):
    t = build_target(spec)
    n = len(betas)
    rngs = [rngmod.stream(seed, "measure", c, j) for j in range(n)]
    r = run_emc(t, betas, np.tile(x0, (n, 1)), steps, rngs, rngmod.stream(seed, "measure", c, "exchange"),
                kernel=kernel, sigmas=sigmas, step_sizes=eps, n_leapfrog=n_leapfrog)
    return r.samples[-1], r.log_p[-1], int(r.n_accept[-1]), r.exchange_rates.tolist()


def _slmc_chain(spec, beta, x0, model, steps, seed, c):
    t = temper(build_target(spec), beta)
    r = run_slmc(t, model, x0, steps, rngmod.stream(seed, "measure", c))
    return r.samples, r.log_p, r.n_accept


# --- pipeline pieces ---------------------------------------------------------


def calibrate(cfg, target, x0, beta):
    """Tune whatever the method needs; returns a JSON-ready dict."""
    method = cfg["method"]
    k = cfg["kernel"]
    out = {}
    tb = temper(target, beta)
    gen = rngmod.stream(cfg["seed"], "calibrate")
    if method in ("MH", "MH-EMC") or (method not in ("HMC", "HMC-EMC") and cfg["init"]["sampler"] == "mh"):
        if k["rw_sigma"] == "auto":
            sig, ar, hist = tune_rw_sigma(tb, x0, gen, n_steps=k["tune_steps"])
            out.update(rw_sigma=sig, rw_ar=ar, rw_history=hist)
        else:
            out["rw_sigma"] = float(k["rw_sigma"])
    if method in ("HMC", "HMC-EMC") or (method == "VAE-SLMC" and cfg["init"]["sampler"] == "hmc"):
        if k["hmc_step_size"] == "auto":
            e, ar, hist = tune_hmc_step(tb, x0, gen, n_leapfrog=k["hmc_leapfrog_steps"],
                                        n_steps=max(200, k["tune_steps"] // 4))
            out.update(hmc_step_size=e, hmc_ar=ar, hmc_history=hist)
        else:
            out["hmc_step_size"] = float(k["hmc_step_size"])
    if method in cfgmod.EMC:
        e = cfg["emc"]
        if "betas" in e:
            out["emc_betas"] = sorted(e["betas"])
        else:
            sig = out.get("rw_sigma", 1.0)
            betas, ar, hist = tune_ladder(target, e["n_chains"], x0, gen, beta_top=beta,
                                          ar_range=tuple(e["exchange_ar"]), sigmas=sig, n_steps=k["tune_steps"])
            out.update(emc_betas=betas.tolist(), emc_exchange_ar=ar, emc_history=hist)
    return out


def initial_data(cfg, target, beta, x0, calib, n_chains_betas=None):
    """Training data for the initial model(s), drawn by a recorded local sub-run.

    Returns ``(datasets, acceptance_rates, info)``; one dataset per beta in
    ``n_chains_betas`` (EMC when there are several).
    """
    init = cfg["init"]
    seed = cfg["seed"]
    n = init["n_samples"]
    stride = init["stride"]
    burn = init["burn_in"]
    steps = int(math.ceil(stride * n / (1.0 - burn)))
    gen = rngmod.stream(seed, "init-data")
    betas = [beta] if n_chains_betas is None else list(n_chains_betas)
    info = {"sampler": init["sampler"], "betas": betas, "steps": steps}
    if init["sampler"] == "exact":
        if target.sampler is None or any(b != 1.0 for b in betas):
            raise ValueError("exact initial data needs an exact sampler at beta = 1")
        data = [target.sampler(n, gen) for _ in betas]
        return data, [1.0] * len(betas), info
    n_local = init["chains"]
    if len(betas) == 1:
        tb = temper(target, betas[0])
        starts = initial_starts(target, x0, n_local, rngmod.stream(seed, "init-starts"))
        sizes = [len(a) for a in np.array_split(np.arange(n), n_local)]
        data, n_acc, n_steps = [], 0, 0
        for i, (start, size) in enumerate(zip(starts, sizes)):
            # chain 0 keeps the plain stream so that a single chain matches a one-chain config
            g = gen if i == 0 else rngmod.stream(seed, "init-data", "chain", i)
            m = int(math.ceil(stride * size / (1.0 - burn)))
            if init["sampler"] == "hmc":
                r = run_hmc(tb, start, calib["hmc_step_size"], cfg["kernel"]["hmc_leapfrog_steps"], m, g)
            else:
                r = run_mh(tb, start, calib["rw_sigma"], m, g)
            data.append(make_training_data(r.samples, stride, size, burn))
            n_acc += r.n_accept
            n_steps += m
        ar = n_acc / n_steps
        info.update(acceptance_rate=ar, chains=n_local, steps=n_steps)
        return [np.concatenate(data)], [ar], info
    rngs = [rngmod.stream(seed, "init-data", j) for j in range(len(betas))]
    r = run_emc(target, betas, np.tile(x0, (len(betas), 1)), steps, rngs, gen, sigmas=calib["rw_sigma"])
    info["acceptance_rates"] = r.acceptance_rates.tolist()
    info["exchange_rates"] = r.exchange_rates.tolist()
    data = [make_training_data(r.samples[j], stride, n, burn) for j in range(len(betas))]
    return data, r.acceptance_rates.tolist(), info


def _summary(cfg, target, chains, calib, extra=None):
    burn = cfg["burn_in"]
    per_chain = []
    for c, (samples, log_p, n_acc) in enumerate(chains):
        start = int(math.floor(burn * len(samples)))
        kept = samples[start:]
        row = {"chain": c, "acceptance_rate": n_acc / len(samples), "n_samples": len(kept)}
        mean = kept.mean(axis=0)
        row["mean"] = mean.tolist()
        reference = target.true_mean if target.true_mean is not None else target.data.get("truth")
        if reference is not None:
            reference = np.asarray(reference, dtype=np.float64)
            row["rmse"] = metrics.rmse(mean, reference)
            if np.sum(np.abs(reference)) > 0:
                row["rem"] = metrics.rem(mean, reference)
        if target.cost is not None:
            row["rmse_opt"] = metrics.optimization_rmse(kept, target)
        if target.spec.get("name") == "gmm":
            occ, resid = metrics.mode_occupancy(kept, target.data["centers"], metrics.gmm_radius(target))
            row["occupancy"] = occ.tolist()
            row["occupancy_residual"] = resid
        if target.name == "Himmelblau":
            occ, resid = metrics.mode_occupancy(kept, target.optima, 1.0)
            row["occupancy"] = occ.tolist()
            row["occupancy_residual"] = resid
        if len(kept) >= 100:
            try:
                rep = metrics.ess_report(kept)
                row["ess"] = rep.value
                row["ess_super_efficient"] = rep.super_efficient
            except ValueError:
                row["ess"] = None
        per_chain.append(row)
    agg = {}
    for key in ("rmse", "rem", "rmse_opt", "ess", "acceptance_rate"):
        vals = [r[key] for r in per_chain if r.get(key) is not None]
        if vals:
            agg[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    out = {"seed": cfg["seed"], "method": cfg["method"], "target": target.name, "chains": per_chain,
           "aggregate": agg, "calibration": {k: v for k, v in calib.items() if not k.endswith("history")}}
    if extra:
        out.update(extra)
    return out


def _metric_rows(cfg, target, chains):
    every = cfg["metrics_every"]
    reference = target.true_mean if target.true_mean is not None else target.data.get("truth")
    rows = []
    for c, (samples, log_p, _) in enumerate(chains):
        means = metrics.running_means(samples)
        moved = np.concatenate([[True], np.any(samples[1:] != samples[:-1], axis=1)])
        ar = np.cumsum(moved) / np.arange(1, len(samples) + 1)
        fbar = None
        if target.cost is not None:
            fbar = np.cumsum(target.cost(samples)) / np.arange(1, len(samples) + 1)
        for t in range(every, len(samples) + 1, every):
            m = means[t - 1]
            r = rem = None
            if reference is not None:
                ref = np.asarray(reference, dtype=np.float64)
                r = float(np.sqrt(np.mean((m - ref) ** 2)))
                if np.sum(np.abs(ref)) > 0:
                    rem = float(np.sum(np.abs(m - ref)) / np.sum(np.abs(ref)))
            opt = None if fbar is None else float(abs(fbar[t - 1] - target.f_star))
            rows.append([c, t, r, rem, opt, float(ar[t - 1])])
    return rows


def _anneal(cfg, target, x0, calib):
    method = cfg["method"]
    seed = cfg["seed"]
    build_kw = cfgmod.vae_kwargs(cfg)
    if method in cfgmod.PARALLEL:
        pcfg = cfgmod.parallel_config(cfg)
        data, ars, info = initial_data(cfg, target, None, x0, calib, pcfg.chain_betas0)
        res = run_parallel_annealing(target, pcfg, data, seed=seed, init_ars=ars, build_kwargs=build_kw)
    else:
        acfg = cfgmod.anneal_config(cfg)
        data, ars, info = initial_data(cfg, target, acfg.beta0, x0, calib)
        runner = run_adaptive_annealing if acfg.mode == "adaptive" else run_constant_annealing
        res = runner(target, acfg, data[0], seed=seed, init_ars=ars, build_kwargs=build_kw)
    return res, info


def run(cfg: dict, output_dir=None, write=True) -> RunReport:
    """Execute the configured pipeline and (optionally) write the report files."""
    cfg = cfgmod.validate(cfg)
    out = Path(output_dir or cfg.get("output_dir") or "run-output")
    files = {}
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfgmod.dump_config(cfg))
        files["config"] = str(out / "config.json")
        marker = out / "FAILED"
        if marker.exists():
            marker.unlink()
    t_start = time.perf_counter()
    try:
        report = _run(cfg, out, files, write)
    except Exception:
        if write:
            (out / "FAILED").write_text(traceback.format_exc())
        raise
    report.summary["wall_seconds"] = time.perf_counter() - t_start
    if write:
        io.write_json(out / "summary.json", report.summary)
        files["summary"] = str(out / "summary.json")
    return report


def _run(cfg, out, files, write):
    target = build_target(cfg["target"])
    method = cfg["method"]
    seed = cfg["seed"]
    beta = measurement_beta(cfg)
    x0 = np.asarray(cfg["initial_state"], dtype=np.float64) if "initial_state" in cfg else default_initial_state(target)
    if write and target.spec.get("name") in ("spectral", "sensor"):
        io.write_json(out / "dataset.json", io.target_dataset(target))
        files["dataset"] = str(out / "dataset.json")
    calib_beta = cfg["anneal"]["beta0"] if method in cfgmod.ANNEALED else beta
    calib = calibrate(cfg, target, x0, calib_beta)
    steps = cfg["steps"]
    n = cfg["chains"]
    spec = target.spec
    anneal = None
    extra = {}
    if method == "MH":
        jobs = [(spec, beta, x0, calib["rw_sigma"], steps, seed, c) for c in range(n)]
        chains = map_chains(_mh_chain, jobs)
    elif method == "HMC":
        jobs = [(spec, beta, x0, calib["hmc_step_size"], cfg["kernel"]["hmc_leapfrog_steps"], steps, seed, c)
                for c in range(n)]
        chains = map_chains(_hmc_chain, jobs)
    elif method in cfgmod.EMC:
        kernel = "mh" if method == "MH-EMC" else "hmc"
        jobs = [(spec, calib["emc_betas"], x0, kernel, calib.get("rw_sigma", 1.0), calib.get("hmc_step_size", 0.1),
                 cfg["kernel"]["hmc_leapfrog_steps"], steps, seed, c) for c in range(n)]
        res = map_chains(_emc_chain, jobs)
        chains = [r[:3] for r in res]
        extra["exchange_rates"] = [r[3] for r in res]
    elif method == "VAE-SLMC":
        data, ars, info = initial_data(cfg, target, beta, x0, calib)
        extra["init"] = info
        model = build_vae(target.dim, beta_vae=cfg["train"]["beta_vae"], rng=rngmod.stream(seed, "init-weights"),
                          **cfgmod.vae_kwargs(cfg))
        tcfg = cfgmod.train_config(cfg)
        model, trace = train(model, data[0], replace(tcfg, rng_seed=rngmod.derive_seed(seed, "training", 0, 0)))
        extra["train_loss"] = {"initial": trace.initial, "final": trace.final}
        if write:
            save_model(model, out / "model", provenance={"target": target.name, "beta": beta, "seed": seed,
                                                         "epochs": tcfg.epochs})
            files["model"] = str(out / "model")
        jobs = [(spec, beta, x0, model, steps, seed, c) for c in range(n)]
        chains = map_chains(_slmc_chain, jobs)
    else:
        anneal, info = _anneal(cfg, target, x0, calib)
        extra["init"] = info
        extra["anneal_steps"] = anneal.trace.n_anneal_steps()
        extra["final_betas"] = [float(b) for b in anneal.final.betas]
        model = anneal.final_models[-1]
        if write:
            anneal.trace.to_csv(out / "anneal_trace.csv")
            files["anneal_trace"] = str(out / "anneal_trace.csv")
            for j, m in enumerate(anneal.final_models):
                save_model(m, out / f"model_chain{j}", provenance={
                    "target": target.name, "beta": float(anneal.final.betas[j]), "seed": seed,
                    "epochs": cfg["train"]["epochs"], "anneal_steps": extra["anneal_steps"]})
            files["model"] = str(out / f"model_chain{len(anneal.final_models) - 1}")
        # measurement chains continue from where annealing left the target chain
        start = anneal.end_states[-1]
        jobs = [(spec, beta, start, model, steps, seed, c) for c in range(n)]
        chains = map_chains(_slmc_chain, jobs)
    chains = [(np.asarray(s), np.asarray(l), int(a)) for s, l, a in chains]
    summary = _summary(cfg, target, chains, calib, extra)
    if write:
        io.write_samples(out / "samples.csv", [(s, l) for s, l, _ in chains])
        files["samples"] = str(out / "samples.csv")
        io.write_rows(out / "metrics.csv", ["chain", "step", "rmse", "rem", "rmse_opt", "acceptance_rate"],
                      _metric_rows(cfg, target, chains))
        files["metrics"] = str(out / "metrics.csv")
        io.write_json(out / "calibration.json", calib)
        files["calibration"] = str(out / "calibration.json")
    return RunReport(cfg, method, chains, summary, files, anneal, calib)


def _setup(cfg):
    cfg = cfgmod.validate(cfg)
    target = build_target(cfg["target"])
    x0 = np.asarray(cfg["initial_state"], dtype=np.float64) if "initial_state" in cfg else default_initial_state(target)
    beta = cfg["anneal"]["beta0"] if cfg["method"] in cfgmod.ANNEALED else measurement_beta(cfg)
    return cfg, target, x0, beta


def run_calibration(cfg: dict, output_dir=None) -> dict:
    """Only the tuning stage; writes ``calibration.json`` when ``output_dir`` is given."""
    cfg, target, x0, beta = _setup(cfg)
    calib = calibrate(cfg, target, x0, beta)
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        io.write_json(Path(output_dir) / "calibration.json", {"seed": cfg["seed"], "beta": beta, **calib})
    return calib


def train_initial(cfg: dict, output_dir) -> dict:
    """Calibrate, draw the initial data and train the initial model(s).

    Writes ``init_data.csv``, ``calibration.json`` and ``model_chain<j>/``.
    """
    cfg, target, x0, beta = _setup(cfg)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    calib = calibrate(cfg, target, x0, beta)
    betas = cfgmod.parallel_config(cfg, x0).chain_betas0 if cfg["method"] in cfgmod.PARALLEL else [beta]
    data, ars, info = initial_data(cfg, target, beta, x0, calib, betas)
    tcfg = cfgmod.train_config(cfg)
    seed = cfg["seed"]
    model = build_vae(target.dim, beta_vae=cfg["train"]["beta_vae"], rng=rngmod.stream(seed, "init-weights"),
                      **cfgmod.vae_kwargs(cfg))
    losses = []
    for j, d in enumerate(data):
        model, trace = train(model, d, replace(tcfg, rng_seed=rngmod.derive_seed(seed, "training", 0, j)))
        losses.append({"initial": trace.initial, "final": trace.final})
        save_model(model, out / f"model_chain{j}", provenance={"target": target.name, "beta": float(betas[j]),
                                                               "seed": seed, "epochs": tcfg.epochs})
    io.write_samples(out / "init_data.csv", [(d, target.log_unnorm(d)) for d in data])
    io.write_json(out / "calibration.json", {"seed": seed, "beta": beta, **calib})
    summary = {"seed": seed, "init": info, "acceptance_rates": ars, "train_loss": losses}
    io.write_json(out / "summary.json", summary)
    return summary
