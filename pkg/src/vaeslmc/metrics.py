"""Sampling and optimization quality metrics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse(chain_mean, true_mean) -> float:
    """``sqrt(mean_d (xbar_d - x*_d)^2)``."""
    a, b = _pair(chain_mean, true_mean)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rem(chain_mean, true_mean) -> float:
    """Relative error of the mean, ``sum |xbar - x*| / sum |x*|``."""
    a, b = _pair(chain_mean, true_mean)
    denom = np.sum(np.abs(b))
    if denom == 0:
        raise ZeroDivisionError("REM is undefined when the true mean is zero; use rmse")
    return float(np.sum(np.abs(a - b)) / denom)


class RunningMoments:
    """Streaming per-dimension mean and second moment."""

    def __init__(self, dim):
        self.count = 0
        self.mean = np.zeros(dim)
        self.second = np.zeros(dim)

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.mean.shape:
            raise DimensionError(f"expected shape {self.mean.shape}, got {x.shape}")
        self.count += 1
        self.mean += (x - self.mean) / self.count
        self.second += (x * x - self.second) / self.count
        return self

    def update_batch(self, xs):
        for x in np.asarray(xs, dtype=np.float64):
            self.update(x)
        return self

    @property
    def variance(self):
        return self.second - self.mean**2


def running_means(samples):
    """Cumulative sample means ``xbar^(t)`` for ``t = 1..T``; shape ``(T, D)``."""
    s = np.asarray(samples, dtype=np.float64)
    return np.cumsum(s, axis=0) / np.arange(1, len(s) + 1)[:, None]


def rmse_trace(samples, true_mean, every=1):
    """``(steps, rmse_t)`` evaluated every ``every`` steps (1-based steps)."""
    means = running_means(samples)
    steps = np.arange(every, len(means) + 1, every)
    err = np.sqrt(np.mean((means[steps - 1] - np.asarray(true_mean)) ** 2, axis=1))
    return steps, err


def rem_trace(samples, true_mean, every=1):
    means = running_means(samples)
    steps = np.arange(every, len(means) + 1, every)
    t = np.asarray(true_mean, dtype=np.float64)
    denom = np.sum(np.abs(t))
    if denom == 0:
        raise ZeroDivisionError("REM is undefined when the true mean is zero; use rmse")
    return steps, np.sum(np.abs(means[steps - 1] - t), axis=1) / denom


def autocorrelation(x, max_lag=None):
    """Lag-``t`` autocorrelations ``rho_t``, ``t = 0..max_lag``.

    The lag-``t`` autocovariance averages the ``N - t`` available products and
    is normalized by the lag-0 value, so ``rho_0 = 1``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    max_lag = n - 1 if max_lag is None else min(max_lag, n - 1)
    c = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(c, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1]
    acov = acov / (n - np.arange(max_lag + 1))
    if acov[0] <= 0:
        raise ZeroDivisionError("zero-variance series")
    return acov / acov[0]


def _geyer_sum(rho):
    # initial positive sequence: sum pairs rho_{2k} + rho_{2k+1} while positive
    total = 0.0
    for k in range(len(rho) // 2):
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0:
            break
        total += pair
    return total


def integrated_autocorr_time(x) -> float:
    """``tau = 1 + 2 sum_{t >= 1} rho_t`` with Geyer truncation (unclamped)."""
    rho = autocorrelation(x)
    return 2.0 * _geyer_sum(rho) - 1.0


@dataclass
class EssReport:
    value: float
    per_dim_x: np.ndarray
    per_dim_x2: np.ndarray
    super_efficient: bool
    skipped: list


def ess_report(samples) -> EssReport:
    """Normalized ESS for every dimension and for ``x`` and ``x^2``.

    Values above 1 (antithetic chains) are clamped to 1 and flagged.
    Zero-variance columns are skipped with a warning.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if len(s) < 100:
        raise ValueError("ESS needs at least 100 samples")
    vals = {}
    skipped = []
    flag = False
    for name, arr in (("x", s), ("x2", s * s)):
        out = np.full(s.shape[1], np.nan)
        for d in range(s.shape[1]):
            col = arr[:, d]
            if np.ptp(col) == 0:
                skipped.append((name, d))
                continue
            tau = integrated_autocorr_time(col)
            e = 1.0 / tau if tau > 0 else np.inf
            if e > 1.0:
                flag = True
                e = 1.0
            out[d] = e
        vals[name] = out
    if skipped:
        warnings.warn(f"ESS skipped zero-variance statistics {skipped}", RuntimeWarning, stacklevel=2)
    allv = np.concatenate([vals["x"], vals["x2"]])
    if np.all(np.isnan(allv)):
        raise ValueError("every dimension has zero variance; ESS undefined")
    return EssReport(float(np.nanmin(allv)), vals["x"], vals["x2"], flag, skipped)


def ess(samples) -> float:
    """Minimum normalized ESS in ``(0, 1]`` across dimensions and first two moments."""
    return ess_report(samples).value


def mode_occupancy(samples, centers, radius):
    """Fraction of samples within ``radius`` of each center, and the residual fraction."""
    s = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if not radius > 0:
        raise ConfigError("radius must be positive")
    if c.shape[1] != s.shape[1]:
        raise DimensionError("centers and samples have different dimensions")
    if len(c) > 1:
        gaps = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)
        gaps[np.diag_indices(len(c))] = np.inf
        if np.min(gaps) < 2 * radius:
            raise ConfigError(f"mode balls of radius {radius} overlap")
    dist = np.linalg.norm(s[:, None, :] - c[None, :, :], axis=2)
    inside = dist <= radius
    fractions = inside.mean(axis=0)
    return fractions, float(1.0 - fractions.sum())


def gmm_radius(target, n_std=3.0):
    """Default occupancy radius: ``n_std`` cluster standard deviations.

    Capped at half the smallest center separation so the balls stay disjoint.
    """
    c = np.asarray(target.data["centers"], dtype=np.float64)
    r = n_std * float(np.sqrt(target.data["variance"]))
    if len(c) > 1:
        gaps = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)
        gaps[np.diag_indices(len(c))] = np.inf
        r = min(r, 0.5 * float(np.min(gaps)) * (1 - 1e-12))
    return r


def optimization_rmse(samples, target) -> float:
    """``|mean f(x) - f(x*)|`` over the samples."""
    s = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if target.cost is None:
        raise ValueError(f"{target.name} has no cost function")
    return float(abs(np.mean(target.cost(s)) - target.optimum_cost()))
