"""Annealing drivers for VAE-SLMC.

Three schedulers share one engine:

* constant annealing walks a fixed ``beta`` schedule;
* adaptive annealing picks each next ``beta`` with :func:`beta_search` so the
  SLMC acceptance rate stays inside ``[ar_min, ar_max]``;
* parallel annealing runs several chains at different ``beta`` with replica
  exchange between neighbours and one VAE per chain.

At every anneal step each chain samples ``T`` states with the model trained
at the previous step, the samples are burned in and thinned into a training
set, and the model is warm-started from its previous weights and retrained.
Chains are ordered by ascending ``beta``; the last chain is the target chain.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng as rngmod
from .errors import AnnealingError, ConfigError, InsufficientSamplesError
from .kernels import AcceptanceEstimator, ChainResult, MultiChainResult, run_eslmc, run_slmc
from .targets import temper
from .vae import TrainConfig, build_vae, train

logger = logging.getLogger(__name__)

_ROUND = 10


@dataclass
class AnnealConfig:
    """Settings of one annealed chain.

    ``T`` defaults to ``ceil(thinning_stride * n_train / (1 - burn_in))`` so
    that burn-in plus thinning leaves exactly ``n_train`` points.
    """

    beta0: float = 0.1
    beta_final: float = 1.0
    mode: str = "adaptive"
    schedule: Optional[list] = None
    ar_min: float = 0.2
    ar_max: float = 1.0
    epsilon: float = 0.01
    T_check: int = 2000
    T: Optional[int] = None
    n_train: int = 15000
    thinning_stride: int = 1
    burn_in: float = 0.1
    beta_candidates: Optional[list] = None
    T_max: Optional[int] = None
    selection: str = "largest"
    max_steps: int = 200
    t_train: Optional[int] = None
    final_T: Optional[int] = None
    initial_state: Optional[list] = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.mode not in ("constant", "adaptive"):
            raise ConfigError(f"unknown mode {self.mode!r}", "mode")
        if not 0 < self.beta0 <= self.beta_final:
            raise ConfigError("need 0 < beta0 <= beta_final", "beta0")
        if not (0 < self.ar_max <= 1 and 0 <= self.ar_min < self.ar_max):
            raise ConfigError("need 0 <= ar_min < ar_max <= 1", "ar_min")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive", "epsilon")
        if self.selection not in ("largest", "smallest"):
            raise ConfigError("selection must be 'largest' or 'smallest'", "selection")
        if not 0 <= self.burn_in < 1:
            raise ConfigError("burn_in must lie in [0, 1)", "burn_in")
        if self.mode == "constant":
            if not self.schedule:
                raise ConfigError("constant annealing needs a schedule", "schedule")
            if any(b2 < b1 for b1, b2 in zip(self.schedule[:-1], self.schedule[1:])):
                raise ConfigError("schedule must be non-decreasing", "schedule")
            if self.schedule[0] != self.beta0:
                raise ConfigError("schedule must start at beta0", "schedule")
        for name in ("T_check", "n_train", "thinning_stride", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)

    @property
    def steps_per_anneal(self) -> int:
        if self.T is not None:
            return int(self.T)
        return int(math.ceil(self.thinning_stride * self.n_train / (1.0 - self.burn_in)))

    @property
    def measure_steps(self) -> int:
        return int(self.final_T) if self.final_T is not None else self.steps_per_anneal


def uniform_schedule(beta0, beta_final, n_values):
    """``n_values`` equally spaced inverse temperatures from ``beta0`` to ``beta_final``."""
    return [round(float(b), _ROUND) for b in np.linspace(beta0, beta_final, n_values)]


@dataclass
class ParallelAnnealConfig:
    """Per-chain configurations, ordered by ascending ``beta0``."""

    chains: list
    exchange: bool = True

    def __post_init__(self):
        if not self.chains:
            raise ConfigError("need at least one chain", "chains")
        b0 = [c.beta0 for c in self.chains]
        if any(b < a for a, b in zip(b0[:-1], b0[1:])):
            raise ConfigError("chains must be ordered by ascending beta0", "chains")
        modes = {c.mode for c in self.chains}
        if len(modes) != 1:
            raise ConfigError("all chains must share one annealing mode", "chains")
        if modes == {"constant"} and len({len(c.schedule) for c in self.chains}) != 1:
            raise ConfigError("constant schedules must have equal length", "chains")

    @property
    def J(self) -> int:
        return len(self.chains) - 1

    @property
    def chain_betas0(self):
        return [c.beta0 for c in self.chains]

    @classmethod
    def ladder(cls, betas0, base: AnnealConfig, n_values=None, exchange=True):
        """Chains at ``betas0`` whose final betas keep the ratios of ``betas0``.

        The top chain ends at ``base.beta_final``; with ``n_values`` set, each
        chain gets a uniform constant schedule of that length.
        """
        betas0 = sorted(float(b) for b in betas0)
        top = betas0[-1]
        chains = []
        for b in betas0:
            final = round(base.beta_final * b / top, _ROUND)
            kw = {"beta0": b, "beta_final": final}
            if n_values is not None:
                kw.update(mode="constant", schedule=uniform_schedule(b, final, n_values))
            chains.append(replace(base, **kw))
        return cls(chains, exchange)


@dataclass
class AnnealRecord:
    k: int
    chain: int
    beta: float
    acceptance_rate: float
    sampling_acceptance_rate: float
    epochs: int
    seconds: float
    phase: str


@dataclass
class AnnealTrace:
    records: list = field(default_factory=list)
    selection: str = "largest"

    COLUMNS = ("k", "chain", "beta", "acceptance_rate", "sampling_acceptance_rate", "epochs", "seconds",
               "phase")

    def append(self, rec: AnnealRecord):
        self.records.append(rec)

    def for_chain(self, j):
        return [r for r in self.records if r.chain == j]

    def betas(self, chain=-1):
        chain = self._chain_index(chain)
        return [r.beta for r in self.for_chain(chain)]

    def n_anneal_steps(self, chain=-1):
        """Number of training phases after the initial one."""
        chain = self._chain_index(chain)
        return sum(1 for r in self.for_chain(chain) if r.phase != "init")

    def _chain_index(self, chain):
        if chain >= 0:
            return chain
        ids = sorted({r.chain for r in self.records})
        return ids[chain]

    def to_csv(self, path):
        """Write the trace with a header row (``seconds`` is wall-clock time)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.k, r.chain, repr(float(r.beta)), repr(float(r.acceptance_rate)),
                            repr(float(r.sampling_acceptance_rate)), r.epochs, repr(float(r.seconds)), r.phase])


@dataclass
class SearchResult:
    beta: float
    acceptance_rate: float
    found: bool
    iterations: int
    evaluated: list


@dataclass
class AnnealResult:
    """Output of an annealing run.

    ``final`` holds the measurement pass at the final betas (one chain per
    configured chain); ``models`` lists the trained models per anneal step
    (only the last when ``keep_models`` is off).  ``end_states`` are the chain
    states reached by the last anneal step, from which ``final`` starts.
    """

    final: MultiChainResult
    models: list
    trace: AnnealTrace
    datasets: Optional[list] = None
    end_states: Optional[np.ndarray] = None

    @property
    def samples(self):
        return self.final.samples[-1]

    @property
    def final_models(self):
        return self.models[-1]

    def chain(self, j=-1) -> ChainResult:
        return self.final.chain(j if j >= 0 else len(self.final.betas) + j)


def make_training_data(samples, stride, n_train, burn_in=0.1):
    """Discard the first ``burn_in`` fraction, keep every ``stride``-th sample, return ``n_train`` points."""
    s = np.asarray(samples)
    if stride < 1 or n_train < 1:
        raise ValueError("stride and n_train must be >= 1")
    start = int(math.floor(burn_in * len(s)))
    kept = s[start::stride]
    if len(kept) < n_train:
        need = int(math.ceil(stride * n_train / (1.0 - burn_in)))
        raise InsufficientSamplesError(
            f"only {len(kept)} samples left after burn-in and thinning, need {n_train}; "
            f"extend T to at least {need}"
        )
    return kept[:n_train]


def _grid(values):
    return [round(float(v), _ROUND) for v in values]


def beta_search(beta_current, model, target, cfg: AnnealConfig, rng, x0) -> SearchResult:
    """Next inverse temperature whose estimated acceptance rate lies in ``[ar_min, ar_max]``.

    Candidates start at ``cfg.beta_candidates`` (default: the final beta) and
    move together by ``-epsilon`` when every candidate is at or below
    ``ar_min`` and by ``+epsilon`` otherwise, for at most ``T_max`` rounds
    (default ``ceil((beta_final - beta_current) / epsilon)``).  If no candidate
    passes, ``beta_current`` is returned with ``found=False``, which makes the
    caller retrain at the same beta.
    """
    est = AcceptanceEstimator(model, target, cfg.T_check, rng, x0)
    cands = _grid(cfg.beta_candidates if cfg.beta_candidates else [cfg.beta_final])
    t_max = cfg.T_max
    if t_max is None:
        t_max = max(1, int(math.ceil(round((cfg.beta_final - beta_current) / cfg.epsilon, 9))))
    evaluated = []
    for it in range(1, t_max + 1):
        clipped = [min(max(c, 0.0), cfg.beta_final) for c in cands]
        ars = est(clipped)
        evaluated.extend(zip(clipped, ars.tolist()))
        passing = [(b, a) for b, a in zip(clipped, ars) if cfg.ar_min <= a <= cfg.ar_max]
        if passing:
            pick = max(passing) if cfg.selection == "largest" else min(passing)
            return SearchResult(pick[0], float(pick[1]), True, it, evaluated)
        step = -cfg.epsilon if np.all(ars <= cfg.ar_min) else cfg.epsilon
        cands = _grid(np.asarray(cands) + step)
    ar_cur = float(est([beta_current])[0])
    return SearchResult(float(beta_current), ar_cur, False, t_max, evaluated)


def _initial_state(cfg, init_data):
    # by default the chain continues from the end of the run that produced its initial data
    if cfg.initial_state is not None:
        return np.asarray(cfg.initial_state, dtype=np.float64)
    return np.asarray(init_data[-1], dtype=np.float64)


def _train_cfg(cfg, seed, k, j):
    return replace(cfg.train, rng_seed=rngmod.derive_seed(seed, "training", k, j))


def _anneal(target, pcfg: ParallelAnnealConfig, init_data, seed, initial_models=None, init_ars=None,
            keep_models=False, keep_datasets=False, build_kwargs=None):
    chains = pcfg.chains
    n = len(chains)
    if len(init_data) != n:
        raise ConfigError(f"expected {n} initial datasets, got {len(init_data)}", "init_data")
    adaptive = chains[0].mode == "adaptive"
    if any(c.t_train is not None for c in chains) and n > 1:
        raise ConfigError("the in-run retrain step is supported for single-chain runs only", "t_train")
    trace = AnnealTrace(selection=chains[0].selection)
    x0s = [_initial_state(c, d) for c, d in zip(chains, init_data)]
    build_kwargs = dict(build_kwargs or {})

    # initial models, trained in ascending-beta order; chain j starts from chain j-1
    models = []
    for j, (c, data) in enumerate(zip(chains, init_data)):
        t0 = time.perf_counter()
        if initial_models is not None:
            m, epochs = initial_models[j], 0
        else:
            if j == 0:
                start = build_vae(target.dim, beta_vae=c.train.beta_vae or 1.0,
                                  rng=rngmod.stream(seed, "init-weights"), **build_kwargs)
            else:
                start = models[j - 1]
            m, _ = train(start, np.asarray(data), _train_cfg(c, seed, 0, j))
            epochs = c.train.epochs
        models.append(m)
        ar0 = float("nan") if init_ars is None else float(init_ars[j])
        trace.append(AnnealRecord(0, j, c.beta0, ar0, ar0, epochs, time.perf_counter() - t0, "init"))
    history = [list(models)] if keep_models else None
    datasets = [list(init_data)] if keep_datasets else None
    betas = [c.beta0 for c in chains]

    k = 0
    while True:
        if adaptive:
            if all(b >= c.beta_final for b, c in zip(betas, chains)):
                break
        elif k + 1 >= len(chains[0].schedule):
            break
        k += 1
        if k > max(c.max_steps for c in chains):
            raise AnnealingError(f"annealing did not reach the final beta within {k - 1} steps", trace)
        t_search = [0.0] * n
        new_betas, search_ars, phases = [], [], []
        for j, c in enumerate(chains):
            t0 = time.perf_counter()
            if not adaptive:
                b = c.schedule[k]
                new_betas.append(b)
                search_ars.append(float("nan"))
                phases.append("anneal" if b > betas[j] else "retrain")
            elif betas[j] >= c.beta_final:
                new_betas.append(betas[j])
                search_ars.append(float("nan"))
                phases.append("hold")
            else:
                res = beta_search(betas[j], models[j], target, c, rngmod.stream(seed, "search", k, j), x0s[j])
                b = min(max(betas[j], res.beta), c.beta_final)
                new_betas.append(b)
                search_ars.append(res.acceptance_rate if res.found else float("nan"))
                phases.append("anneal" if res.found and b > betas[j] else "retrain")
                logger.info("step %d chain %d: beta %.6g -> %.6g (AR %.3f, %d rounds)",
                            k, j, betas[j], b, res.acceptance_rate, res.iterations)
            t_search[j] = time.perf_counter() - t0

        t0 = time.perf_counter()
        run = _sample(target, models, new_betas, x0s, chains, seed, ("chain", k), pcfg.exchange)
        x0s = [np.asarray(x, dtype=np.float64) for x in run.final_states]
        t_sample = (time.perf_counter() - t0) / n

        new_models, new_data = [], []
        for j, c in enumerate(chains):
            t0 = time.perf_counter()
            data = make_training_data(run.samples[j], c.thinning_stride, c.n_train, c.burn_in)
            m, _ = train(models[j], data, _train_cfg(c, seed, k, j))
            new_models.append(m)
            new_data.append(data)
            ar = search_ars[j] if adaptive and not math.isnan(search_ars[j]) else float(run.acceptance_rates[j])
            trace.append(AnnealRecord(k, j, new_betas[j], ar, float(run.acceptance_rates[j]), c.train.epochs,
                                      t_search[j] + t_sample + time.perf_counter() - t0, phases[j]))
        models, betas = new_models, new_betas
        if keep_models:
            history.append(list(models))
        if keep_datasets:
            datasets.append(new_data)

    final = _sample(target, models, betas, x0s, chains, seed, ("final",), pcfg.exchange, measure=True)
    return AnnealResult(final, history if keep_models else [models], trace, datasets, np.array(x0s))


def _sample(target, models, betas, x0s, chains, seed, name, exchange, measure=False):
    n = len(chains)
    steps = chains[0].measure_steps if measure else chains[0].steps_per_anneal
    rngs = [rngmod.stream(seed, *name, j) for j in range(n)]
    c0 = chains[0]
    if n == 1 and c0.t_train is not None:
        tb = temper(target, betas[0])

        state = {"data": None, "seen": 0, "count": 0}

        def retrain(samples, model):
            # grow the training set with the thinned samples produced since the last retrain
            fresh = np.asarray(samples[state["seen"]:])[:: c0.thinning_stride]
            state["seen"] = len(samples)
            state["data"] = fresh if state["data"] is None else np.concatenate([state["data"], fresh])
            state["count"] += 1
            m, _ = train(model, state["data"], _train_cfg(c0, seed, "retrain", state["count"]))
            return m

        res = run_slmc(tb, models[0], x0s[0], steps, rngs[0], t_train=c0.t_train, retrain=retrain)
        return MultiChainResult(res.samples[None], res.log_p[None], np.asarray(betas, dtype=float),
                                np.array([res.n_accept]), steps, np.zeros(0, dtype=int), np.zeros(0, dtype=int),
                                res.samples[-1:].copy())
    return run_eslmc(target, models, betas, x0s, steps, rngs, rngmod.stream(seed, *name, "exchange"),
                     exchange=exchange)


def run_constant_annealing(target, cfg: AnnealConfig, init_data, seed=0, **kw) -> AnnealResult:
    """Walk ``cfg.schedule``; a single-entry schedule is plain VAE-SLMC at ``beta0``."""
    if cfg.mode != "constant":
        cfg = replace(cfg, mode="constant")
    return _anneal(target, ParallelAnnealConfig([cfg], exchange=False), [init_data], seed, **kw)


def run_adaptive_annealing(target, cfg: AnnealConfig, init_data, seed=0, **kw) -> AnnealResult:
    """Adaptive schedule chosen by :func:`beta_search` until ``beta_final`` is reached."""
    if cfg.mode != "adaptive":
        cfg = replace(cfg, mode="adaptive", schedule=None)
    return _anneal(target, ParallelAnnealConfig([cfg], exchange=False), [init_data], seed, **kw)


def run_parallel_annealing(target, pcfg: ParallelAnnealConfig, init_data_per_chain, seed=0, **kw) -> AnnealResult:
    """Parallel annealing with replica exchange between adjacent chains."""
    return _anneal(target, pcfg, list(init_data_per_chain), seed, **kw)
