import math

import numpy as np
import pytest

from vaeslmc.annealing import (
    AnnealConfig,
    ParallelAnnealConfig,
    beta_search,
    make_training_data,
    run_adaptive_annealing,
    run_constant_annealing,
    run_parallel_annealing,
    uniform_schedule,
)
from vaeslmc.errors import AnnealingError, ConfigError, InsufficientSamplesError
from vaeslmc.kernels import AcceptanceEstimator, OracleProposal
from vaeslmc.targets import Target, gaussian_mixture
from vaeslmc.vae import TrainConfig

TINY = {"encoder_hidden": (16, 16), "decoder_hidden": (16, 16)}


def std_normal(dim=1):
    return Target("N", dim, lambda x: -0.5 * np.sum(x * x, axis=1), lambda x: -x, true_mean=np.zeros(dim))


def wide_proposal(scale=3.0):
    return OracleProposal(lambda n, r: scale * r.standard_normal((n, 1)),
                          lambda x: -0.5 * x[:, 0] ** 2 / scale**2)


def tiny_cfg(**kw):
    base = dict(beta0=0.1, n_train=400, T_check=300, train=TrainConfig(epochs=8, batch_size=100),
                initial_state=[5.0, 5.0])
    base.update(kw)
    return AnnealConfig(**base)


class TestConfig:
    def test_default_T(self):
        assert AnnealConfig().steps_per_anneal == math.ceil(15000 / 0.9)
        assert AnnealConfig(thinning_stride=3, n_train=90, burn_in=0.1).steps_per_anneal == 300
        assert AnnealConfig(T=77).steps_per_anneal == 77

    def test_uniform_schedule(self):
        s = uniform_schedule(0.1, 1.0, 10)
        assert s[0] == 0.1 and s[-1] == 1.0 and len(s) == 10
        assert s[1] == 0.2

    @pytest.mark.parametrize("kw", [
        {"beta0": 0.0}, {"beta0": 2.0}, {"ar_min": 0.5, "ar_max": 0.4}, {"epsilon": 0.0},
        {"mode": "constant"}, {"mode": "constant", "schedule": [0.1, 0.5, 0.3]}, {"burn_in": 1.0},
        {"mode": "other"},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            AnnealConfig(**kw)

    def test_parallel_ordering(self):
        with pytest.raises(ConfigError):
            ParallelAnnealConfig([AnnealConfig(beta0=0.5), AnnealConfig(beta0=0.1)])

    def test_ladder(self):
        p = ParallelAnnealConfig.ladder([0.2, 0.1], AnnealConfig(beta_final=2.0), n_values=5)
        assert p.chain_betas0 == [0.1, 0.2]
        assert [c.beta_final for c in p.chains] == [1.0, 2.0]
        assert all(len(c.schedule) == 5 for c in p.chains)


class TestTrainingData:
    def test_burn_and_thin(self):
        s = np.arange(100)[:, None]
        d = make_training_data(s, stride=3, n_train=20, burn_in=0.1)
        assert d[0, 0] == 10 and d[1, 0] == 13 and len(d) == 20

    def test_insufficient(self):
        with pytest.raises(InsufficientSamplesError, match="at least"):
            make_training_data(np.zeros((50, 1)), stride=2, n_train=30)


class TestBetaSearch:
    def test_accepts_final_beta_when_easy(self):
        cfg = AnnealConfig(ar_min=0.2, T_check=500)
        res = beta_search(0.1, wide_proposal(), std_normal(), cfg, np.random.default_rng(0), np.zeros(1))
        assert res.found and res.beta == 1.0 and res.iterations == 1

    def test_steps_down_until_passing(self):
        cfg = AnnealConfig(ar_min=0.6, epsilon=0.01, T_check=2000)
        model, target = wide_proposal(4.0), std_normal()
        res = beta_search(0.01, model, target, cfg, np.random.default_rng(1), np.zeros(1))
        assert res.found
        assert cfg.ar_min <= res.acceptance_rate <= cfg.ar_max
        assert res.beta < 1.0
        # the candidate one epsilon higher was rejected
        higher = [a for b, a in res.evaluated if b == pytest.approx(res.beta + 0.01)]
        assert higher and higher[0] < cfg.ar_min
        # same common random numbers reproduce the reported rate
        est = AcceptanceEstimator(model, target, cfg.T_check, np.random.default_rng(1), np.zeros(1))
        assert est([res.beta])[0] == res.acceptance_rate

    def test_steps_up_above_ar_max(self):
        cfg = AnnealConfig(ar_min=0.0, ar_max=0.5, epsilon=0.1, beta_candidates=[0.2], T_check=1000)
        res = beta_search(0.1, wide_proposal(1.2), std_normal(), cfg, np.random.default_rng(2), np.zeros(1))
        assert [b for b, _ in res.evaluated][:2] == [0.2, 0.3]

    def test_exhaustion_returns_current(self):
        cfg = AnnealConfig(ar_min=0.99, T_max=3, T_check=200)
        res = beta_search(0.3, wide_proposal(), std_normal(), cfg, np.random.default_rng(3), np.zeros(1))
        assert not res.found and res.beta == 0.3 and res.iterations == 3

    def test_parallel_candidates_pick_largest(self):
        cfg = AnnealConfig(ar_min=0.2, beta_candidates=[0.4, 0.7, 1.0], T_check=500)
        res = beta_search(0.1, wide_proposal(), std_normal(), cfg, np.random.default_rng(0), np.zeros(1))
        assert res.beta == 1.0 and len(res.evaluated) == 3


@pytest.fixture(scope="module")
def adaptive_run():
    t = gaussian_mixture(2, 2)
    init = t.sampler(400, np.random.default_rng(0))
    return run_adaptive_annealing(t, tiny_cfg(ar_min=0.3), init, seed=5, build_kwargs=TINY)


class TestAnnealing:
    def test_adaptive_reaches_final(self, adaptive_run):
        betas = adaptive_run.trace.betas()
        assert betas[0] == 0.1 and betas[-1] == 1.0
        assert all(b2 >= b1 for b1, b2 in zip(betas[:-1], betas[1:]))
        assert adaptive_run.final.betas[-1] == 1.0

    def test_recorded_rates_respect_bound(self, adaptive_run):
        for r in adaptive_run.trace.records:
            if r.phase == "anneal":
                assert r.acceptance_rate >= 0.3

    def test_deterministic(self, adaptive_run):
        t = gaussian_mixture(2, 2)
        init = t.sampler(400, np.random.default_rng(0))
        again = run_adaptive_annealing(t, tiny_cfg(ar_min=0.3), init, seed=5, build_kwargs=TINY)
        assert np.array_equal(again.samples, adaptive_run.samples)
        assert again.trace.betas() == adaptive_run.trace.betas()

    def test_trace_csv(self, adaptive_run, tmp_path):
        adaptive_run.trace.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].startswith("k,chain,beta,acceptance_rate")
        assert len(lines) == len(adaptive_run.trace.records) + 1

    def test_constant_schedule(self):
        t = gaussian_mixture(2, 2)
        cfg = tiny_cfg(mode="constant", schedule=[0.1, 0.55, 1.0])
        res = run_constant_annealing(t, cfg, t.sampler(400, np.random.default_rng(1)), seed=0, build_kwargs=TINY,
                                     keep_models=True)
        assert res.trace.betas() == [0.1, 0.55, 1.0]
        assert len(res.models) == 3
        assert res.trace.n_anneal_steps() == 2

    def test_max_steps(self):
        t = gaussian_mixture(2, 2)
        cfg = tiny_cfg(ar_min=0.999, ar_max=1.0, max_steps=2, T_max=1)
        with pytest.raises(AnnealingError) as err:
            run_adaptive_annealing(t, cfg, t.sampler(400, np.random.default_rng(1)), seed=0, build_kwargs=TINY)
        assert err.value.trace.records

    def test_parallel(self):
        t = gaussian_mixture(2, 2)
        base = tiny_cfg(ar_min=0.2)
        p = ParallelAnnealConfig.ladder([0.1, 0.2], base)
        data = [t.sampler(400, np.random.default_rng(j)) for j in range(2)]
        res = run_parallel_annealing(t, p, data, seed=1, build_kwargs=TINY)
        assert list(res.final.betas) == [0.5, 1.0]
        assert len(res.final_models) == 2
        assert res.final.exchange_attempts.sum() > 0

    def test_retrain_within_run(self):
        t = gaussian_mixture(2, 2)
        cfg = tiny_cfg(mode="constant", schedule=[0.1, 1.0], t_train=200, T=450)
        res = run_constant_annealing(t, cfg, t.sampler(400, np.random.default_rng(1)), seed=0, build_kwargs=TINY)
        assert res.samples.shape == (450, 2)
