"""Markov transition kernels.

Random-walk Metropolis-Hastings, Hamiltonian Monte Carlo, the self-learning
(independence) kernel driven by a trained proposal model, and the replica
exchange move.  All acceptance tests are done in log space: a move with log
ratio ``r`` is accepted iff ``log(u) < r`` for ``u ~ U(0, 1)``, which is the
same as ``u < min(1, exp(r))`` without ever exponentiating.

Single-step functions take and return a :class:`ChainState`.  The ``run_*``
functions are faster batch drivers for long chains; because SLMC proposals do
not depend on the chain state they draw all proposals up front and only the
accept/reject recursion is sequential.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError

logger = logging.getLogger(__name__)


@dataclass
class ChainState:
    """Current state of one chain plus its counters and random stream."""

    x: np.ndarray
    log_p: float
    rng: np.random.Generator
    t: int = 0
    accept_count: int = 0
    proposal_count: int = 0
    log_gamma: Optional[float] = None

    @classmethod
    def start(cls, target, x, rng):
        x = np.array(x, dtype=np.float64)
        lp = float(target.log_unnorm(x))
        if lp == -np.inf:
            raise ValueError("initial state is outside the target support")
        return cls(x, lp, rng)

    @property
    def acceptance_rate(self) -> float:
        return self.accept_count / self.proposal_count if self.proposal_count else float("nan")


@dataclass
class KernelConfig:
    rw_sigma: float = 1.0
    hmc_step_size: float = 0.1
    hmc_leapfrog_steps: int = 10

    def __post_init__(self):
        if not (self.rw_sigma > 0 and self.hmc_step_size > 0 and self.hmc_leapfrog_steps >= 1):
            raise ValueError("kernel parameters must be positive")


@dataclass
class ChainResult:
    """Samples ``x^(1..T)`` of one chain with their (tempered) log densities."""

    samples: np.ndarray
    log_p: np.ndarray
    n_accept: int
    n_steps: int
    final_log_gamma: Optional[float] = None

    @property
    def acceptance_rate(self) -> float:
        return self.n_accept / self.n_steps if self.n_steps else float("nan")


def log_accept(log_ratio, u) -> bool:
    """Log-space Metropolis test; ``-inf`` or NaN ratios always reject."""
    if log_ratio != log_ratio:
        return False
    if u <= 0.0:
        return log_ratio > -math.inf
    return math.log(u) < log_ratio


def _advance(state, x_new, lp_new, accepted, **extra):
    if accepted:
        return dataclasses.replace(state, x=x_new, log_p=lp_new, t=state.t + 1,
                                   accept_count=state.accept_count + 1,
                                   proposal_count=state.proposal_count + 1, **extra)
    return dataclasses.replace(state, t=state.t + 1, proposal_count=state.proposal_count + 1)


# --- random-walk Metropolis-Hastings ----------------------------------------


def mh_step(state: ChainState, target, sigma, rng=None, proposal=None) -> ChainState:
    """One Metropolis step with ``x' ~ N(x, sigma^2 I)``.

    ``proposal(x, rng)`` may replace the Gaussian with any other symmetric
    proposal, for instance a random walk on a discrete state space.
    """
    rng = state.rng if rng is None else rng
    if proposal is None:
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        x_new = state.x + sigma * rng.standard_normal(state.x.shape)
    else:
        x_new = np.asarray(proposal(state.x, rng), dtype=np.float64)
    lp_new = float(target.log_unnorm(x_new))
    ok = log_accept(lp_new - state.log_p if lp_new > -np.inf else -np.inf, rng.random())
    return _advance(state, x_new, lp_new, ok)


def run_mh(target, x0, sigma, n_steps, rng, proposal=None) -> ChainResult:
    x = np.array(x0, dtype=np.float64)
    lp = float(target.log_unnorm(x))
    if lp == -np.inf:
        raise ValueError("initial state is outside the target support")
    d = x.shape[0]
    samples = np.empty((n_steps, d))
    logs = np.empty(n_steps)
    n_acc = 0
    if proposal is None:
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        noise = sigma * rng.standard_normal((n_steps, d))
        logu = np.log(rng.random(n_steps))
    for t in range(n_steps):
        if proposal is None:
            x_new = x + noise[t]
            lu = logu[t]
        else:
            x_new = np.asarray(proposal(x, rng), dtype=np.float64)
            lu = math.log(rng.random())
        lp_new = float(target.log_unnorm(x_new))
        if lu < lp_new - lp:
            x, lp = x_new, lp_new
            n_acc += 1
        samples[t] = x
        logs[t] = lp
    return ChainResult(samples, logs, n_acc, n_steps)


# --- Hamiltonian Monte Carlo ------------------------------------------------


def leapfrog(x, p, grad_log_p, step_size, n_steps):
    """``n_steps`` leapfrog steps for ``H = -log p(x) + |p|^2 / 2``."""
    x = np.array(x, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    p = p + 0.5 * step_size * grad_log_p(x)
    for i in range(n_steps):
        x = x + step_size * p
        g = grad_log_p(x)
        p = p + (step_size if i < n_steps - 1 else 0.5 * step_size) * g
    return x, p


def _hmc_propose(x, lp, target, step_size, n_leapfrog, rng):
    p0 = rng.standard_normal(x.shape)
    lu = math.log(rng.random())
    with np.errstate(all="ignore"):
        x_new, p_new = leapfrog(x, p0, target.grad_log_unnorm, step_size, n_leapfrog)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(p_new))):
        logger.debug("non-finite leapfrog trajectory; rejecting")
        return x, lp, False
    with np.errstate(all="ignore"):
        lp_new = float(target.log_unnorm(x_new))
        log_ratio = (lp_new - 0.5 * p_new @ p_new) - (lp - 0.5 * p0 @ p0)
    if lu < log_ratio:
        return x_new, lp_new, True
    return x, lp, False


def hmc_step(state: ChainState, target, step_size, n_leapfrog, rng=None) -> ChainState:
    if n_leapfrog < 1:
        raise ValueError("need at least one leapfrog step")
    rng = state.rng if rng is None else rng
    x_new, lp_new, ok = _hmc_propose(state.x, state.log_p, target, step_size, n_leapfrog, rng)
    return _advance(state, x_new, lp_new, ok)


def run_hmc(target, x0, step_size, n_leapfrog, n_steps, rng) -> ChainResult:
    x = np.array(x0, dtype=np.float64)
    lp = float(target.log_unnorm(x))
    if lp == -np.inf:
        raise ValueError("initial state is outside the target support")
    samples = np.empty((n_steps, x.shape[0]))
    logs = np.empty(n_steps)
    n_acc = 0
    for t in range(n_steps):
        x, lp, ok = _hmc_propose(x, lp, target, step_size, n_leapfrog, rng)
        n_acc += ok
        samples[t] = x
        logs[t] = lp
    return ChainResult(samples, logs, n_acc, n_steps)


# --- self-learning (independence) kernel ------------------------------------


class OracleProposal:
    """Proposal model with an explicitly known density.

    ``sampler(n, rng)`` draws ``(n, D)`` states and ``log_density(x)``
    evaluates the (unnormalized) log proposal density on a batch.  Stands in
    for a trained VAE wherever the kernel needs ``sample`` and ``log_gamma``.
    """

    def __init__(self, sampler, log_density):
        self._sampler = sampler
        self._log_density = log_density

    def sample(self, n, rng):
        return np.asarray(self._sampler(n, rng), dtype=np.float64)

    def sample_proposal(self, rng):
        return self.sample(1, rng)[0]

    def log_gamma(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.asarray(self._log_density(np.atleast_2d(x)), dtype=np.float64)
        return out[0] if x.ndim == 1 else out


def _weights(log_p, log_gamma):
    """Importance weight ``log p~ - log Gamma``; ``-inf`` where either is unusable."""
    w = np.asarray(log_p, dtype=np.float64) - np.asarray(log_gamma, dtype=np.float64)
    bad = ~np.isfinite(log_gamma) | (np.asarray(log_p) == -np.inf)
    return np.where(bad, -np.inf, w)


def slmc_step(state: ChainState, target, model, rng=None) -> ChainState:
    """One independence step with ``x' ~ p_theta`` and the Gamma-corrected ratio."""
    rng = state.rng if rng is None else rng
    x_new = model.sample(1, rng)[0]
    lu = math.log(rng.random())
    lg_cur = state.log_gamma if state.log_gamma is not None else float(model.log_gamma(state.x))
    lg_new = float(model.log_gamma(x_new))
    lp_new = float(target.log_unnorm(x_new))
    if not math.isfinite(lg_new):
        logger.warning("non-finite log Gamma for a proposal; rejecting")
    w_new = float(_weights(lp_new, lg_new))
    w_cur = float(_weights(state.log_p, lg_cur))
    ok = lu < w_new - w_cur if w_new > -np.inf else False
    if ok:
        return _advance(state, x_new, lp_new, True, log_gamma=lg_new)
    out = _advance(state, x_new, lp_new, False)
    out.log_gamma = lg_cur
    return out


def independence_chain(w_prop, w0, logu):
    """Accept/reject recursion of an independence sampler.

    Returns, for each step, the index of the proposal that is the current
    state after that step (``-1`` means the initial state), plus the number of
    accepted moves.
    """
    n = len(w_prop)
    idx = np.empty(n, dtype=np.int64)
    cur, w_cur, n_acc = -1, w0, 0
    for t in range(n):
        wt = w_prop[t]
        if logu[t] < wt - w_cur:
            cur, w_cur = t, wt
            n_acc += 1
        idx[t] = cur
    return idx, n_acc


def _slmc_segment(target, model, x0, lp0, n_steps, rng):
    proposals = model.sample(n_steps, rng)
    logu = np.log(rng.random(n_steps))
    lp = target.log_unnorm(proposals)
    lg = model.log_gamma(proposals)
    lg0 = float(model.log_gamma(x0))
    idx, n_acc = independence_chain(_weights(lp, lg), float(_weights(lp0, lg0)), logu)
    samples = np.where(idx[:, None] >= 0, proposals[np.maximum(idx, 0)], x0)
    logs = np.where(idx >= 0, lp[np.maximum(idx, 0)], lp0)
    final_lg = float(lg[idx[-1]]) if n_steps and idx[-1] >= 0 else lg0
    return samples, logs, n_acc, final_lg


def run_slmc(target, model, x0, n_steps, rng, t_train=None, retrain=None) -> ChainResult:
    """VAE-SLMC chain of ``n_steps`` steps from ``x0``.

    With ``t_train`` set, ``retrain(samples_so_far, model)`` is called every
    ``t_train`` steps and must return the model used from then on.
    """
    x0 = np.array(x0, dtype=np.float64)
    lp0 = float(target.log_unnorm(x0))
    if lp0 == -np.inf:
        raise ValueError("initial state is outside the target support")
    if t_train is None or retrain is None:
        s, l, a, lg = _slmc_segment(target, model, x0, lp0, n_steps, rng)
        return ChainResult(s, l, a, n_steps, lg)
    if t_train < 1:
        raise ValueError("t_train must be >= 1")
    parts, logs, n_acc, lg = [], [], 0, None
    x, lp, done = x0, lp0, 0
    while done < n_steps:
        m = min(t_train, n_steps - done)
        s, l, a, lg = _slmc_segment(target, model, x, lp, m, rng)
        parts.append(s)
        logs.append(l)
        n_acc += a
        done += m
        x, lp = s[-1], l[-1]
        if done < n_steps:
            model = retrain(np.concatenate(parts), model)
    return ChainResult(np.concatenate(parts), np.concatenate(logs), n_acc, n_steps, lg)


def estimate_acceptance_rate(model, target, t_check, rng, x0) -> float:
    """Acceptance rate of a ``t_check``-step SLMC run started at ``x0``."""
    if t_check < 1:
        raise ValueError("t_check must be >= 1")
    return run_slmc(target, model, x0, t_check, rng).acceptance_rate


class AcceptanceEstimator:
    """Acceptance rates of a fixed model at any inverse temperature.

    One set of ``t_check`` proposals and uniforms is drawn at construction and
    reused for every ``beta`` (common random numbers).  Proposals do not
    depend on the chain state, so the estimate for each ``beta`` is exactly
    what a separate ``t_check``-step run with the replayed stream would give.
    Results are memoized per ``beta``.
    """

    def __init__(self, model, target, t_check, rng, x0):
        if t_check < 1:
            raise ValueError("t_check must be >= 1")
        self.t_check = int(t_check)
        proposals = model.sample(self.t_check, rng)
        self._logu = np.log(rng.random(self.t_check))
        self._base = target.log_untempered(proposals)
        self._lg = model.log_gamma(proposals)
        x0 = np.asarray(x0, dtype=np.float64)
        self._base0 = float(target.log_untempered(x0))
        self._lg0 = float(model.log_gamma(x0))
        if self._base0 == -np.inf:
            raise ValueError("initial state is outside the target support")
        self._cache = {}

    def _compute(self, betas):
        finite = np.isfinite(self._base)
        tempered = np.where(finite, betas[:, None] * np.where(finite, self._base, 0.0), -np.inf)
        w = _weights(tempered, np.broadcast_to(self._lg, tempered.shape))
        w_cur = _weights(betas * self._base0, np.full(len(betas), self._lg0))
        n_acc = np.zeros(len(betas), dtype=np.int64)
        logu = self._logu
        for t in range(self.t_check):
            acc = logu[t] < w[:, t] - w_cur
            w_cur = np.where(acc, w[:, t], w_cur)
            n_acc += acc
        return n_acc / self.t_check

    def __call__(self, betas):
        betas = np.atleast_1d(np.asarray(betas, dtype=np.float64))
        todo = sorted({float(b) for b in betas if float(b) not in self._cache})
        if todo:
            for b, ar in zip(todo, self._compute(np.array(todo))):
                self._cache[b] = float(ar)
        return np.array([self._cache[float(b)] for b in betas])


def estimate_acceptance_rates(model, target, betas, t_check, rng, x0):
    """Acceptance rates at several inverse temperatures from one proposal set."""
    return AcceptanceEstimator(model, target, t_check, rng, x0)(betas)


# --- replica exchange -------------------------------------------------------


def exchange_log_ratio(beta_a, beta_b, base_a, base_b):
    """``(beta_a - beta_b) (log p~(x_b) - log p~(x_a))`` with untempered logs."""
    if beta_a == beta_b:
        return 0.0
    return (beta_a - beta_b) * (base_b - base_a)


def exchange_step(states, target, betas, rng):
    """Propose swapping two chain states at inverse temperatures ``betas``.

    Returns ``((state_a, state_b), accepted)``.  Cached values that depend on
    the chain (``log_p`` and ``log_gamma``) are refreshed after a swap.
    """
    a, b = states
    beta_a, beta_b = betas
    base_a = float(target.log_untempered(a.x))
    base_b = float(target.log_untempered(b.x))
    ok = math.log(rng.random()) < exchange_log_ratio(beta_a, beta_b, base_a, base_b)
    if not ok:
        return (a, b), False
    new_a = dataclasses.replace(a, x=b.x, log_p=beta_a * base_b, log_gamma=None)
    new_b = dataclasses.replace(b, x=a.x, log_p=beta_b * base_a, log_gamma=None)
    return (new_a, new_b), True


def exchange_pairs(n_chains, sweep):
    """Adjacent pairs ``(j, j+1)`` with ``j`` of the sweep's parity."""
    return [(j, j + 1) for j in range(sweep % 2, n_chains - 1, 2)]


@dataclass
class MultiChainResult:
    samples: np.ndarray  # (chains, T, D)
    log_p: np.ndarray  # (chains, T), tempered with each chain's beta
    betas: np.ndarray
    n_accept: np.ndarray
    n_steps: int
    exchange_accept: np.ndarray  # per adjacent pair
    exchange_attempts: np.ndarray
    final_states: Optional[np.ndarray] = None

    @property
    def acceptance_rates(self):
        return self.n_accept / self.n_steps

    @property
    def exchange_rates(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.exchange_accept / self.exchange_attempts

    def chain(self, j) -> ChainResult:
        return ChainResult(self.samples[j], self.log_p[j], int(self.n_accept[j]), self.n_steps)


def run_eslmc(target, models, betas, x0s, n_steps, chain_rngs, exchange_rng, exchange=True):
    """Exchange SLMC: one independence chain per ``beta`` plus replica swaps.

    Chain ``j`` draws its proposals from ``models[j]`` with ``chain_rngs[j]``.
    All proposals are pooled, so every model's ``log Gamma`` is evaluated once
    per pooled state and a swapped state keeps a valid weight under its new
    chain's model.  With a single chain this is exactly :func:`run_slmc`.
    """
    betas = np.asarray(betas, dtype=np.float64)
    n_chains = len(betas)
    if not (len(models) == len(x0s) == len(chain_rngs) == n_chains):
        raise DimensionError("models, betas, x0s and chain_rngs must have equal length")
    proposals, logus = [], []
    for model, r in zip(models, chain_rngs):
        proposals.append(model.sample(n_steps, r))
        logus.append(np.log(r.random(n_steps)))
    x0s = np.asarray(x0s, dtype=np.float64).reshape(n_chains, -1)
    pool = np.concatenate(proposals + [x0s])
    base = target.log_untempered(pool)
    if np.any(target.log_untempered(x0s) == -np.inf):
        raise ValueError("an initial state is outside the target support")
    finite = np.isfinite(base)
    w = np.empty((n_chains, len(pool)))
    for j, model in enumerate(models):
        tempered = np.where(finite, betas[j] * np.where(finite, base, 0.0), -np.inf)
        w[j] = _weights(tempered, model.log_gamma(pool))
    cur = [n_chains * n_steps + j for j in range(n_chains)]
    idx = np.empty((n_chains, n_steps), dtype=np.int64)
    n_acc = np.zeros(n_chains, dtype=np.int64)
    ex_acc = np.zeros(max(n_chains - 1, 0), dtype=np.int64)
    ex_try = np.zeros(max(n_chains - 1, 0), dtype=np.int64)
    ex_logu = np.log(exchange_rng.random((n_steps, max(n_chains - 1, 1)))) if exchange and n_chains > 1 else None
    for t in range(n_steps):
        for j in range(n_chains):
            p = j * n_steps + t
            if logus[j][t] < w[j, p] - w[j, cur[j]]:
                cur[j] = p
                n_acc[j] += 1
        if ex_logu is not None:
            for a, b in exchange_pairs(n_chains, t):
                ex_try[a] += 1
                r = exchange_log_ratio(betas[a], betas[b], base[cur[a]], base[cur[b]])
                if ex_logu[t, a] < r:
                    cur[a], cur[b] = cur[b], cur[a]
                    ex_acc[a] += 1
        idx[:, t] = cur
    samples = pool[idx]
    logs = np.where(np.isfinite(base[idx]), betas[:, None] * base[idx], -np.inf)
    return MultiChainResult(samples, logs, betas, n_acc, n_steps, ex_acc, ex_try, samples[:, -1].copy())


def run_emc(target, betas, x0s, n_steps, chain_rngs, exchange_rng, kernel="mh", sigmas=None,
            step_sizes=None, n_leapfrog=5) -> MultiChainResult:
    """Replica exchange with local MH or HMC moves at each ``beta``."""
    from .targets import temper

    betas = np.asarray(betas, dtype=np.float64)
    n_chains = len(betas)
    tempered = [temper(target, b) for b in betas]
    xs = [np.array(x, dtype=np.float64) for x in np.asarray(x0s, dtype=np.float64).reshape(n_chains, -1)]
    lps = [float(tempered[j].log_unnorm(xs[j])) for j in range(n_chains)]
    if any(lp == -np.inf for lp in lps):
        raise ValueError("an initial state is outside the target support")
    d = xs[0].shape[0]
    samples = np.empty((n_chains, n_steps, d))
    logs = np.empty((n_chains, n_steps))
    n_acc = np.zeros(n_chains, dtype=np.int64)
    ex_acc = np.zeros(max(n_chains - 1, 0), dtype=np.int64)
    ex_try = np.zeros(max(n_chains - 1, 0), dtype=np.int64)
    if kernel == "mh":
        sig = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (n_chains,))
        noise = [sig[j] * chain_rngs[j].standard_normal((n_steps, d)) for j in range(n_chains)]
        logu = [np.log(chain_rngs[j].random(n_steps)) for j in range(n_chains)]
    elif kernel == "hmc":
        eps = np.broadcast_to(np.asarray(step_sizes, dtype=np.float64), (n_chains,))
    else:
        raise ValueError(f"unknown local kernel {kernel!r}")
    for t in range(n_steps):
        for j in range(n_chains):
            if kernel == "mh":
                x_new = xs[j] + noise[j][t]
                lp_new = float(tempered[j].log_unnorm(x_new))
                if logu[j][t] < lp_new - lps[j]:
                    xs[j], lps[j] = x_new, lp_new
                    n_acc[j] += 1
            else:
                xs[j], lps[j], ok = _hmc_propose(xs[j], lps[j], tempered[j], eps[j], n_leapfrog, chain_rngs[j])
                n_acc[j] += ok
        for a, b in exchange_pairs(n_chains, t):
            ex_try[a] += 1
            base_a = lps[a] / betas[a] if betas[a] > 0 else float(target.log_untempered(xs[a]))
            base_b = lps[b] / betas[b] if betas[b] > 0 else float(target.log_untempered(xs[b]))
            if math.log(exchange_rng.random()) < exchange_log_ratio(betas[a], betas[b], base_a, base_b):
                xs[a], xs[b] = xs[b], xs[a]
                lps[a], lps[b] = betas[a] * base_b, betas[b] * base_a
                ex_acc[a] += 1
        for j in range(n_chains):
            samples[j, t] = xs[j]
            logs[j, t] = lps[j]
    return MultiChainResult(samples, logs, betas, n_acc, n_steps, ex_acc, ex_try, np.array(xs))


# --- exact transition matrices on finite state spaces ----------------------


def acceptance_probability(log_ratio):
    """``min(1, exp(r))`` elementwise; ``-inf`` and NaN give 0."""
    r = np.asarray(log_ratio, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        out = np.exp(np.minimum(r, 0.0))
    return np.where(np.isnan(r), 0.0, out)


def _with_rejection_mass(moves):
    p = moves.copy()
    np.fill_diagonal(p, 0.0)
    np.fill_diagonal(p, 1.0 - p.sum(axis=1))
    return p


def mh_transition_matrix(target, states, proposal_matrix):
    """Metropolis kernel on ``states`` for a symmetric ``proposal_matrix[i, j] = q(j | i)``."""
    lp = target.log_unnorm(np.asarray(states, dtype=np.float64))
    q = np.asarray(proposal_matrix, dtype=np.float64)
    if not np.allclose(q, q.T, rtol=0, atol=1e-15):
        raise ValueError("proposal matrix must be symmetric")
    with np.errstate(invalid="ignore"):
        acc = acceptance_probability(lp[None, :] - lp[:, None])
    return _with_rejection_mass(q * acc)


def slmc_transition_matrix(target, model, states, proposal_probs):
    """Independence kernel on ``states``: propose ``j`` w.p. ``proposal_probs[j]``.

    The acceptance uses the same ``log p~ - log Gamma`` weights as the chain
    drivers, with ``Gamma`` taken from ``model.log_gamma``.
    """
    x = np.asarray(states, dtype=np.float64)
    w = _weights(target.log_unnorm(x), model.log_gamma(x))
    with np.errstate(invalid="ignore"):
        acc = acceptance_probability(w[None, :] - w[:, None])
    q = np.broadcast_to(np.asarray(proposal_probs, dtype=np.float64), acc.shape)
    return _with_rejection_mass(q * acc)


# --- calibration ------------------------------------------------------------


def _bracket_search(measure, lo_ar, hi_ar, scale0, max_iter=30):
    """Find a scale whose acceptance rate lies in ``[lo_ar, hi_ar]``.

    ``measure(scale)`` must be (roughly) decreasing in ``scale``.  Doubles or
    halves until the band is bracketed, then bisects geometrically.
    """
    history = []
    scale = float(scale0)
    ar = measure(scale)
    history.append((scale, ar))
    lo_s = hi_s = None
    for _ in range(max_iter):
        if lo_ar <= ar <= hi_ar:
            return scale, ar, history
        if ar > hi_ar:
            lo_s = scale
            scale = scale * 2.0 if hi_s is None else math.sqrt(lo_s * hi_s)
        else:
            hi_s = scale
            scale = scale / 2.0 if lo_s is None else math.sqrt(lo_s * hi_s)
        ar = measure(scale)
        history.append((scale, ar))
    logger.warning("calibration did not reach [%.3g, %.3g]; last AR %.3g", lo_ar, hi_ar, ar)
    best = min(history, key=lambda h: abs(h[1] - 0.5 * (lo_ar + hi_ar)))
    return best[0], best[1], history


def tune_rw_sigma(target, x0, rng, ar_range=(0.15, 0.25), n_steps=4000, sigma0=1.0):
    """Random-walk scale with acceptance rate in ``ar_range``; returns ``(sigma, ar, history)``."""

    def measure(s):
        return run_mh(target, x0, s, n_steps, rng).acceptance_rate

    return _bracket_search(measure, *ar_range, sigma0)


def tune_hmc_step(target, x0, rng, n_leapfrog=10, ar_range=(0.4, 0.6), n_steps=1000, step0=0.1):
    def measure(e):
        return run_hmc(target, x0, e, n_leapfrog, n_steps, rng).acceptance_rate

    return _bracket_search(measure, *ar_range, step0)


def tune_ladder(target, n_chains, x0, rng, beta_top=1.0, ar_range=(0.2, 0.3), sigmas=None, n_steps=4000,
                ratio0=0.5):
    """Geometric ladder ``beta_top * r^(J - j)`` with mean exchange AR in ``ar_range``.

    Returns ``(betas, mean_exchange_ar, history)``; betas ascend with ``j``.
    """
    if n_chains < 2:
        return np.array([beta_top]), float("nan"), []
    sigmas = 1.0 if sigmas is None else sigmas

    def ladder(r):
        return beta_top * r ** np.arange(n_chains - 1, -1, -1)

    def measure(gap):
        # gap = -log r, larger gap -> fewer exchanges
        betas = ladder(math.exp(-gap))
        res = run_emc(target, betas, np.tile(x0, (n_chains, 1)), n_steps, [rng] * n_chains, rng, sigmas=sigmas)
        return float(np.mean(res.exchange_rates))

    gap, ar, history = _bracket_search(measure, *ar_range, -math.log(ratio0))
    return ladder(math.exp(-gap)), ar, history
