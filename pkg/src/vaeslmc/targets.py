"""Tempered unnormalized target densities.

Every target exposes ``log_unnorm(x)`` for a single state ``(D,)`` or a batch
``(n, D)``, an optional analytic gradient, the true mean when it is known and,
for optimization problems, the cost function together with its global optima.
Tempering multiplies the log density (and its gradient) by ``beta``; box
supports are enforced by returning ``-inf`` outside the box.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .errors import DimensionError


@dataclass(frozen=True)
class Target:
    """An unnormalized density ``p~(x)^beta``.

    ``base_log`` and ``base_grad`` evaluate the untempered log density and its
    gradient on a batch ``(n, D)`` inside the support.  Use :func:`temper` to
    change ``beta``.
    """

    name: str
    dim: int
    base_log: Callable
    base_grad: Optional[Callable] = None
    beta: float = 1.0
    bounds: Optional[tuple] = None
    true_mean: Optional[np.ndarray] = None
    optima: Optional[np.ndarray] = None
    cost: Optional[Callable] = None
    f_star: Optional[float] = None
    sampler: Optional[Callable] = None
    data: dict = field(default_factory=dict)
    spec: dict = field(default_factory=dict)

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        xb = x[None, :] if squeeze else x
        if xb.ndim != 2 or xb.shape[1] != self.dim:
            raise DimensionError(f"{self.name}: expected dim {self.dim}, got shape {x.shape}")
        return xb, squeeze

    def in_support(self, x):
        xb, squeeze = self._batch(x)
        ok = np.all(np.isfinite(xb), axis=1)
        if self.bounds is not None:
            lo, hi = self.bounds
            ok &= np.all((xb >= lo) & (xb <= hi), axis=1)
        return ok[0] if squeeze else ok

    def log_untempered(self, x):
        """``log p~(x)`` at ``beta = 1`` (``-inf`` outside the support)."""
        xb, squeeze = self._batch(x)
        ok = self.in_support(xb)
        out = np.full(len(xb), -np.inf)
        if np.any(ok):
            out[ok] = self.base_log(xb[ok])
        return out[0] if squeeze else out

    def log_unnorm(self, x):
        """``beta * log p~(x)``; exactly 0 on the support when ``beta == 0``."""
        base = self.log_untempered(x)
        if self.beta == 1.0:
            return base
        finite = np.isfinite(base)
        # avoid 0 * inf; outside the support stays -inf
        return np.where(finite, self.beta * np.where(finite, base, 0.0), -np.inf)

    __call__ = log_unnorm

    def grad_log_unnorm(self, x):
        if self.base_grad is None:
            raise NotImplementedError(f"{self.name} has no analytic gradient")
        xb, squeeze = self._batch(x)
        g = self.beta * self.base_grad(xb)
        return g[0] if squeeze else g

    @property
    def has_grad(self) -> bool:
        return self.base_grad is not None

    def optimum_cost(self):
        if self.f_star is None:
            raise ValueError(f"{self.name} has no known optimum value")
        return self.f_star


def temper(target: Target, beta: float) -> Target:
    """Same target at inverse temperature ``beta`` (absolute, not relative)."""
    beta = float(beta)
    if not beta >= 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return dataclasses.replace(target, beta=beta)


def _box(lo, hi, dim):
    return (np.full(dim, float(lo)), np.full(dim, float(hi)))


# --- Gaussian mixtures ------------------------------------------------------

GMM_CENTER_LEVELS = {
    2: (-1.0, 1.0),
    3: (-1.0, 0.0, 1.0),
    4: (-3.0, -1.0, 1.0, 3.0),
    5: (-4.0, -2.0, 0.0, 2.0, 4.0),
}


def gmm_variance(dim):
    return 0.5 * np.sqrt(dim / 100.0)


def gaussian_mixture(n_clusters: int, dim: int) -> Target:
    """Equal-weight isotropic mixture with centers ``c * 1_D`` on a symmetric grid."""
    if n_clusters not in GMM_CENTER_LEVELS:
        raise ValueError(f"unsupported cluster count {n_clusters}; use one of 2..5")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    var = gmm_variance(dim)
    centers = np.array([np.full(dim, c) for c in GMM_CENTER_LEVELS[n_clusters]])
    log_w = -np.log(n_clusters)
    log_norm = -0.5 * dim * np.log(2.0 * np.pi * var)

    def comp_logs(x):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        return log_w + log_norm - 0.5 * d2 / var

    def base_log(x):
        return logsumexp(comp_logs(x), axis=1)

    def base_grad(x):
        lc = comp_logs(x)
        resp = np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
        return (resp @ centers - x) / var

    def sampler(n, rng):
        k = rng.integers(n_clusters, size=n)
        return centers[k] + np.sqrt(var) * rng.standard_normal((n, dim))

    return Target(
        name=f"GMM-{n_clusters}",
        dim=dim,
        base_log=base_log,
        base_grad=base_grad,
        true_mean=np.zeros(dim),
        optima=centers,
        sampler=sampler,
        data={"variance": var, "centers": centers},
        spec={"name": "gmm", "clusters": n_clusters, "dim": dim},
    )


# --- toy targets ------------------------------------------------------------


def _gaussian(name, cov, spec, data=None):
    cov = np.asarray(cov, dtype=np.float64)
    dim = cov.shape[0]
    prec = np.linalg.inv(cov)
    prec = 0.5 * (prec + prec.T)
    chol = np.linalg.cholesky(cov)

    def base_log(x):
        return -0.5 * np.einsum("ni,ij,nj->n", x, prec, x)

    def base_grad(x):
        return -x @ prec

    def sampler(n, rng):
        return rng.standard_normal((n, dim)) @ chol.T

    return Target(
        name=name,
        dim=dim,
        base_log=base_log,
        base_grad=base_grad,
        true_mean=np.zeros(dim),
        sampler=sampler,
        data={"covariance": cov, **(data or {})},
        spec=spec,
    )


def icg(dim=100, seed=0):
    """Ill-conditioned Gaussian: log-spaced eigenvalues 1e-2..1e2, seeded random basis."""
    eig = np.logspace(-2, 2, dim)
    q, r = np.linalg.qr(rngmod.stream(seed, "icg-basis").standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    cov = (q * eig) @ q.T
    cov = 0.5 * (cov + cov.T)
    return _gaussian("ICG", cov, {"name": "toy", "toy": "ICG", "dim": dim, "seed": seed},
                     {"eigenvalues": eig, "basis": q})


def scg():
    """Strongly correlated 2D Gaussian: variances (100, 0.01) rotated by pi/4."""
    c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([1e2, 1e-2]) @ rot.T
    return _gaussian("SCG", cov, {"name": "toy", "toy": "SCG"})


def banana():
    """``x1 ~ N(0, 10^2)``, ``x2 | x1 ~ N(0.03 (x1^2 - 100), 1)``."""

    def base_log(x):
        r = x[:, 1] - 0.03 * (x[:, 0] ** 2 - 100.0)
        return -0.5 * x[:, 0] ** 2 / 100.0 - 0.5 * r * r

    def base_grad(x):
        r = x[:, 1] - 0.03 * (x[:, 0] ** 2 - 100.0)
        return np.stack([-x[:, 0] / 100.0 + r * 0.06 * x[:, 0], -r], axis=1)

    def sampler(n, rng):
        x1 = 10.0 * rng.standard_normal(n)
        x2 = 0.03 * (x1 * x1 - 100.0) + rng.standard_normal(n)
        return np.stack([x1, x2], axis=1)

    return Target("BANANA", 2, base_log, base_grad, true_mean=np.zeros(2), sampler=sampler,
                  spec={"name": "toy", "toy": "BANANA"})


def rough_well(dim=2, eta=1e-2):
    """Standard normal with a high-frequency ripple ``eta * sum(cos(x / eta))``."""

    def base_log(x):
        return -0.5 * np.sum(x * x, axis=1) + eta * np.sum(np.cos(x / eta), axis=1)

    def base_grad(x):
        return -x - np.sin(x / eta)

    def sampler(n, rng):
        # rejection from N(0, I): the ripple factor exp(eta (cos - 1)) lies in [exp(-2 eta), 1]
        out = np.empty((n, dim))
        filled = 0
        while filled < n:
            m = int(1.1 * (n - filled)) + 16
            x = rng.standard_normal((m, dim))
            keep = np.log(rng.random(m)) < eta * np.sum(np.cos(x / eta) - 1.0, axis=1)
            x = x[keep][: n - filled]
            out[filled:filled + len(x)] = x
            filled += len(x)
        return out

    return Target("RW", dim, base_log, base_grad, true_mean=np.zeros(dim), sampler=sampler,
                  data={"eta": eta}, spec={"name": "toy", "toy": "RW", "dim": dim, "eta": eta})


def toy_targets(name: str, **kwargs) -> Target:
    factories = {"ICG": icg, "SCG": scg, "BANANA": banana, "RW": rough_well}
    if name not in factories:
        raise ValueError(f"unknown toy target {name!r}; choose from {sorted(factories)}")
    return factories[name](**kwargs)


# --- spectral analysis ------------------------------------------------------


def spectral_posterior(n_freq=8, n_obs=50, period=1.0, noise_std=0.1, seed=0, true_freqs=None,
                       observations=None) -> Target:
    """Posterior over frequencies ``f in [0, 0.5]^N`` of a sum of unit cosines.

    The signal is ``y_k = sum_i cos(2 pi f_i k T) + r_k`` with
    ``r_k ~ N(0, noise_std^2)``.  The observation series is generated once from
    ``seed`` (or passed in) and stored in ``data``.
    """
    if true_freqs is None:
        true_freqs = np.resize([0.1, 0.4], n_freq)
    true_freqs = np.asarray(true_freqs, dtype=np.float64)
    if true_freqs.shape != (n_freq,):
        raise DimensionError("true_freqs must have length n_freq")
    tk = np.arange(n_obs) * period
    if observations is None:
        noise = noise_std * rngmod.stream(seed, "spectral-noise").standard_normal(n_obs)
        observations = np.cos(2.0 * np.pi * np.outer(true_freqs, tk)).sum(axis=0) + noise
    y = np.asarray(observations, dtype=np.float64)
    if y.shape != (n_obs,):
        raise DimensionError("observations must have length n_obs")
    inv_var = 1.0 / noise_std**2

    def resid(f):
        return y[None, :] - np.cos(2.0 * np.pi * f[:, :, None] * tk).sum(axis=1)

    def base_log(f):
        r = resid(f)
        return -0.5 * inv_var * np.sum(r * r, axis=1)

    def base_grad(f):
        r = resid(f)
        # d resid / d f_i = 2 pi t sin(2 pi f_i t)
        dr = 2.0 * np.pi * tk * np.sin(2.0 * np.pi * f[:, :, None] * tk)
        return -inv_var * np.einsum("nk,nik->ni", r, dr)

    return Target(
        name="spectral",
        dim=n_freq,
        base_log=base_log,
        base_grad=base_grad,
        bounds=_box(0.0, 0.5, n_freq),
        # coordinate-permutation symmetry makes every marginal mean equal
        true_mean=np.full(n_freq, true_freqs.mean()),
        data={"true_freqs": true_freqs, "observations": y, "period": period, "noise_std": noise_std},
        spec={"name": "spectral", "n_freq": n_freq, "n_obs": n_obs, "period": period,
              "noise_std": noise_std, "seed": seed},
    )


# --- sensor network localization --------------------------------------------


def _sensor_pairs(n_unknown, n_total):
    return [(a, b) for a in range(n_unknown) for b in range(a + 1, n_total)]


def sensor_posterior(n_unknown=8, n_known=3, radius=0.3, obs_std=0.02, length=1.0, seed=0,
                     nonobservation_terms=True, known=None, truth=None, observed=None) -> Target:
    """Posterior over the planar positions of ``n_unknown`` sensors on ``[0, L]^2``.

    A pair at distance ``d`` is observed with probability
    ``exp(-0.5 d^2 / R^2)``; an observed pair reports ``d + eps`` with
    ``eps ~ N(0, obs_std^2)``.  ``observed`` may be given explicitly as a dict
    ``{(a, b): d_obs}`` with sensor indices where known sensors come after the
    unknown ones; otherwise the layout and observations are generated from
    ``seed``.
    """
    dim = 2 * n_unknown
    n_total = n_unknown + n_known
    gen = rngmod.stream(seed, "sensor-layout")
    if truth is None:
        truth = gen.uniform(0.0, length, size=(n_unknown, 2))
    if known is None:
        known = gen.uniform(0.0, length, size=(n_known, 2))
    truth = np.asarray(truth, dtype=np.float64).reshape(n_unknown, 2)
    known = np.asarray(known, dtype=np.float64).reshape(n_known, 2)
    pairs = _sensor_pairs(n_unknown, n_total)
    if observed is None:
        pos = np.vstack([truth, known])
        obs_gen = rngmod.stream(seed, "sensor-observations")
        observed = {}
        for a, b in pairs:
            d = np.linalg.norm(pos[a] - pos[b])
            if obs_gen.uniform() < np.exp(-0.5 * d * d / radius**2):
                observed[(a, b)] = d + obs_std * obs_gen.standard_normal()
    obs_pairs = np.array([p for p in pairs if p in observed], dtype=int).reshape(-1, 2)
    obs_d = np.array([observed[tuple(p)] for p in obs_pairs], dtype=np.float64)
    miss_pairs = np.array([p for p in pairs if p not in observed], dtype=int).reshape(-1, 2)
    if not nonobservation_terms:
        miss_pairs = miss_pairs[:0]
    r2 = radius**2
    s2 = obs_std**2

    def positions(x):
        n = len(x)
        return np.concatenate([x.reshape(n, n_unknown, 2), np.broadcast_to(known, (n, n_known, 2))], axis=1)

    def diffs(pos, idx):
        return pos[:, idx[:, 0], :] - pos[:, idx[:, 1], :]

    def base_log(x):
        pos = positions(x)
        out = np.zeros(len(x))
        if len(obs_pairs):
            v = diffs(pos, obs_pairs)
            d = np.sqrt(np.sum(v * v, axis=2))
            out += np.sum(-0.5 * d * d / r2 - 0.5 * (obs_d - d) ** 2 / s2, axis=1)
        if len(miss_pairs):
            v = diffs(pos, miss_pairs)
            u = 0.5 * np.sum(v * v, axis=2) / r2
            with np.errstate(divide="ignore"):
                out += np.sum(np.log(-np.expm1(-u)), axis=1)
        return out

    def base_grad(x):
        pos = positions(x)
        g = np.zeros_like(pos)
        if len(obs_pairs):
            v = diffs(pos, obs_pairs)
            d = np.sqrt(np.sum(v * v, axis=2))
            coef = -1.0 / r2 + (obs_d - d) / (s2 * d)
            w = coef[:, :, None] * v
            np.add.at(g, (slice(None), obs_pairs[:, 0]), w)
            np.add.at(g, (slice(None), obs_pairs[:, 1]), -w)
        if len(miss_pairs):
            v = diffs(pos, miss_pairs)
            u = 0.5 * np.sum(v * v, axis=2) / r2
            with np.errstate(divide="ignore"):
                w = (1.0 / np.expm1(u) / r2)[:, :, None] * v
            np.add.at(g, (slice(None), miss_pairs[:, 0]), w)
            np.add.at(g, (slice(None), miss_pairs[:, 1]), -w)
        return g[:, :n_unknown, :].reshape(len(x), dim)

    return Target(
        name="sensor",
        dim=dim,
        base_log=base_log,
        base_grad=base_grad,
        bounds=_box(0.0, length, dim),
        true_mean=None,
        data={
            "truth": truth.reshape(-1),
            "known": known,
            "observed_pairs": obs_pairs,
            "observed_distances": obs_d,
            "radius": radius,
            "obs_std": obs_std,
        },
        spec={"name": "sensor", "n_unknown": n_unknown, "n_known": n_known, "radius": radius,
              "obs_std": obs_std, "length": length, "seed": seed,
              "nonobservation_terms": nonobservation_terms},
    )


# --- optimization benchmarks ------------------------------------------------

HIMMELBLAU_OPTIMA = np.array(
    [[3.0, 2.0], [-2.805118, 3.131312], [-3.779310, -3.283186], [3.584428, -1.848126]]
)


def _styblinski_tang_root():
    # global minimizer per coordinate: the smaller real root of 4x^3 - 32x + 5
    roots = np.roots([4.0, 0.0, -32.0, 5.0])
    return float(np.min(roots.real))


def _optimization_target(name, dim, cost, cost_grad, lo, hi, optima, f_star, spec):
    return Target(
        name=name,
        dim=dim,
        base_log=lambda x: -cost(x),
        base_grad=lambda x: -cost_grad(x),
        bounds=_box(lo, hi, dim),
        optima=np.atleast_2d(optima),
        cost=cost,
        f_star=f_star,
        spec=spec,
    )


def himmelblau() -> Target:
    def cost(x):
        a = x[:, 0] ** 2 + x[:, 1] - 11.0
        b = x[:, 0] + x[:, 1] ** 2 - 7.0
        return a * a + b * b

    def cost_grad(x):
        a = x[:, 0] ** 2 + x[:, 1] - 11.0
        b = x[:, 0] + x[:, 1] ** 2 - 7.0
        return np.stack([4.0 * a * x[:, 0] + 2.0 * b, 2.0 * a + 4.0 * b * x[:, 1]], axis=1)

    return _optimization_target("Himmelblau", 2, cost, cost_grad, -6.0, 6.0, HIMMELBLAU_OPTIMA, 0.0,
                                {"name": "optimization", "problem": "Himmelblau", "dim": 2})


def rastrigin(dim) -> Target:
    def cost(x):
        return 10.0 * x.shape[1] + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x), axis=1)

    def cost_grad(x):
        return 2.0 * x + 20.0 * np.pi * np.sin(2.0 * np.pi * x)

    return _optimization_target("Rastrigin", dim, cost, cost_grad, -5.12, 5.12, np.zeros(dim), 0.0,
                                {"name": "optimization", "problem": "Rastrigin", "dim": dim})


def styblinski_tang(dim) -> Target:
    def cost(x):
        return 0.5 * np.sum(x**4 - 16.0 * x * x + 5.0 * x, axis=1)

    def cost_grad(x):
        return 0.5 * (4.0 * x**3 - 32.0 * x + 5.0)

    root = _styblinski_tang_root()
    f_star = float(cost(np.full((1, dim), root))[0])
    return _optimization_target("StyblinskiTang", dim, cost, cost_grad, -5.0, 5.0, np.full(dim, root),
                                f_star, {"name": "optimization", "problem": "StyblinskiTang", "dim": dim})


def optimization_targets(name: str, dim: int = 2) -> Target:
    if name == "Himmelblau":
        if dim != 2:
            raise DimensionError("Himmelblau is defined for D = 2 only")
        return himmelblau()
    if name == "Rastrigin":
        return rastrigin(dim)
    if name == "StyblinskiTang":
        return styblinski_tang(dim)
    raise ValueError(f"unknown optimization problem {name!r}")


# --- discrete adapter -------------------------------------------------------


def discrete_target(probs) -> Target:
    """Target on the integer states ``0..K-1`` embedded in one dimension.

    Non-integer or out-of-range states are outside the support.  Useful for
    checking kernels against explicitly computed transition matrices.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or np.any(probs <= 0):
        raise ValueError("probs must be a positive 1D array")
    logp = np.log(probs)
    k = len(probs)

    def base_log(x):
        idx = np.rint(x[:, 0])
        out = np.full(len(x), -np.inf)
        ok = (idx == x[:, 0]) & (idx >= 0) & (idx < k)
        out[ok] = logp[idx[ok].astype(int)]
        return out

    return Target("discrete", 1, base_log, true_mean=np.array([np.dot(np.arange(k), probs) / probs.sum()]),
                  data={"probs": probs / probs.sum()}, spec={"name": "discrete", "probs": probs.tolist()})


def build_target(spec: dict) -> Target:
    """Rebuild a target from its ``spec`` dict (as stored in ``Target.spec``)."""
    spec = dict(spec)
    kind = spec.pop("name")
    beta = spec.pop("beta", None)
    if kind == "gmm":
        t = gaussian_mixture(spec["clusters"], spec["dim"])
    elif kind == "toy":
        t = toy_targets(spec.pop("toy"), **spec)
    elif kind == "spectral":
        t = spectral_posterior(**spec)
    elif kind == "sensor":
        t = sensor_posterior(**spec)
    elif kind == "optimization":
        t = optimization_targets(spec["problem"], spec.get("dim", 2))
    elif kind == "discrete":
        t = discrete_target(spec["probs"])
    else:
        raise ValueError(f"unknown target kind {kind!r}")
    return temper(t, beta) if beta is not None else t
