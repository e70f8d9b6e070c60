import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from consensusjm import ChainConfig, ModelSpec, default_params, simulate_dataset
from consensusjm.data import JointDataset, Subject, SurvivalRecord
from consensusjm.errors import SingularDesignError
from consensusjm.model import JointModel
from consensusjm.report import effective_sample_size, summarize
from consensusjm.sampler import (JITTER_SD, _Sampler, chain_seed, initialize, run_chain,
                                 run_subsample)
from oracles import lmm_gibbs
import study

SHORT = ChainConfig(n_chains=2, n_iter=300, n_warmup=100, seed=5)


@pytest.fixture(scope="module")
def sim200():
    return simulate_dataset(default_params(), 200, 21)


def _ks_against_grid(samples, log_density, grid):
    """KS distance of ``samples`` to the distribution with unnormalised log density on ``grid``."""
    lp = np.array([log_density(x) for x in grid])
    dens = np.exp(lp - lp.max())
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    return stats.kstest(samples, lambda x: np.interp(x, grid, cdf)).statistic


# configuration ---------------------------------------------------------------
def test_config_defaults_and_validation():
    c = ChainConfig()
    assert (c.n_chains, c.n_iter, c.n_warmup, c.thin) == (3, 3500, 500, 1)
    assert c.n_draws == 3000
    assert ChainConfig(n_iter=1500, n_warmup=500, thin=4).n_draws == 250
    for bad in (dict(n_chains=0), dict(n_warmup=3500), dict(thin=7), dict(adapt_window=0)):
        with pytest.raises(ValueError):
            ChainConfig(**bad)


# initial values ----------------------------------------------------------------
def test_duplicate_design_column_is_singular():
    subs = []
    for i in range(5):
        t = np.array([0.0, 1.0, 2.0]) + 0.1 * i
        rec = SurvivalRecord(str(i), 3.0, 1, {"sex": 0.0, "age": 50.0})
        subs.append(Subject(str(i), t, t + i, rec, {"one": np.ones(3)}))  # duplicates the intercept
    ds = JointDataset(tuple(subs))
    spec = ModelSpec(baseline="weibull", longitudinal_covariates=("one",)).resolved(ds)
    with pytest.raises(SingularDesignError):
        initialize(spec, ds, 0, 1)


def test_chains_differ_only_by_jitter(small_data):
    spec = ModelSpec(baseline="weibull", survival=False).resolved(small_data)
    P = len(spec.layout())
    alpha = spec.layout().alpha
    centred = []
    for k in range(3):
        th, b = initialize(spec, small_data, k, 99)
        jitter = np.random.default_rng(chain_seed(99, 0, k, 0)).normal(0.0, JITTER_SD, P)
        jitter[alpha] = 0.0
        centred.append(th - jitter)
        assert np.all(b == 0)
    np.testing.assert_allclose(centred[1], centred[0], atol=1e-12)
    np.testing.assert_allclose(centred[2], centred[0], atol=1e-12)
    assert not np.allclose(initialize(spec, small_data, 1, 99)[0], initialize(spec, small_data, 2, 99)[0])


def test_initial_values_match_least_squares_oracle(small_data):
    spec = ModelSpec(baseline="weibull", survival=False).resolved(small_data)
    lay = spec.layout()
    th, _ = initialize(spec, small_data, 0, 7)
    th -= np.random.default_rng(chain_seed(7, 0, 0, 0)).normal(0.0, JITTER_SD, len(lay))
    X = np.concatenate([np.column_stack([np.ones(s.n_obs), spec.ns_basis.evaluate(s.times)]) for s in small_data])
    y = np.concatenate([s.values for s in small_data])
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    sd = math.sqrt(np.sum((y - X @ beta) ** 2) / (y.size - X.shape[1]))
    np.testing.assert_allclose(th[lay.beta], beta, atol=1e-8)
    assert th[lay.log_sigma_y] == pytest.approx(math.log(sd), abs=1e-10)
    np.testing.assert_allclose(th[lay.gamma], 0.0, atol=1e-12)
    np.testing.assert_allclose(lay.covariance(th), np.eye(4), atol=1e-12)


@pytest.mark.xfail(strict=True, reason="least squares on the retained measurements is biased by "
                                       "informative dropout: late slopes miss truth by 2.5 to 5")
def test_initial_beta_within_two_of_truth():
    ds, truth = simulate_dataset(default_params(), 500, 3)
    spec = replace(ModelSpec(baseline="weibull"), ns_basis=truth.basis).resolved(ds)
    th, _ = initialize(spec, ds, 0, 3)
    assert np.all(np.abs(th[:4] - np.array(default_params().beta)) <= 2.0)


def test_nonfinite_start_is_an_error(small_data):
    from consensusjm.errors import NumericalError

    spec = ModelSpec(baseline="weibull").resolved(small_data)
    m = JointModel(spec, small_data)
    th, b = initialize(spec, small_data, 0, 1, model=m)
    th[m.layout.alpha] = 1e6
    with pytest.raises(NumericalError):
        _Sampler(m, SHORT, th, b, 1, np.random.default_rng(0))


# chain contracts -----------------------------------------------------------------
def test_chain_is_deterministic(small_data, weibull_spec):
    a = run_chain(weibull_spec, small_data, SHORT, 1)
    b = run_chain(weibull_spec, small_data, SHORT, 1)
    assert a.draws.tobytes() == b.draws.tobytes()
    assert a.re_mean.tobytes() == b.re_mean.tobytes()
    c = run_chain(weibull_spec, small_data, replace(SHORT, seed=6), 1)
    assert c.draws.tobytes() != a.draws.tobytes()


def test_chain_shape_and_valid_rows(small_data):
    spec = ModelSpec()
    d = run_chain(spec, small_data, SHORT, 0)
    lay = spec.resolved(small_data).layout()
    assert d.draws.shape == (SHORT.n_draws, len(lay))
    assert d.names == lay.names
    back = lay.from_constrained(lay.to_constrained(d.draws))
    np.testing.assert_allclose(back, d.draws, atol=1e-9)
    assert np.all(np.linalg.eigvalsh(lay.covariance(d.draws)) > 0)
    assert set(d.acceptance) >= {"beta", "survival", "b"}
    assert d.seconds > 0
    assert d.re_mean.shape == (len(small_data), 4) and tuple(d.re_ids) == tuple(small_data.ids)


def test_thinning(small_data, weibull_spec):
    d = run_chain(weibull_spec, small_data, replace(SHORT, thin=4), 0)
    assert d.draws.shape[0] == 50


def test_scales_frozen_after_warmup(small_data):
    d = run_chain(ModelSpec(), small_data, SHORT, 0)
    assert d.scales_warmup_end.keys() == d.scales_final.keys()
    for k in d.scales_final:
        np.testing.assert_array_equal(d.scales_warmup_end[k], d.scales_final[k])


def test_adaptation_moves_scales_during_warmup(small_data, weibull_spec):
    m = JointModel(weibull_spec.resolved(small_data), small_data)
    th, b = initialize(m.spec, small_data, 0, SHORT.seed, model=m)
    s = _Sampler(m, SHORT, th, b, 1, np.random.default_rng(1))
    before = s.scales()
    s.run()
    assert any(not np.array_equal(before[k], s.scales()[k]) for k in before)


def test_single_chain_subsample_equals_run_chain(small_data, weibull_spec):
    cfg = replace(SHORT, n_chains=1)
    spec = weibull_spec.resolved(small_data)
    (only,) = run_subsample(spec, small_data, cfg)
    ref = run_chain(spec, small_data, cfg, 0)
    assert only.draws.tobytes() == ref.draws.tobytes()


def test_subsample_runs_all_chains(small_data, weibull_spec):
    out = run_subsample(weibull_spec, small_data, SHORT, core_cap=1)
    assert [c.chain for c in out] == [0, 1]
    assert out[0].draws.tobytes() == run_chain(weibull_spec.resolved(small_data), small_data, SHORT, 0).draws.tobytes()


@pytest.mark.skipif((os.cpu_count() or 1) < 3, reason="needs one free core per chain")
def test_parallel_chains_take_max_not_sum(small_data, weibull_spec):
    cfg = replace(SHORT, n_chains=3, n_iter=600)
    t0 = time.perf_counter()
    chains = run_subsample(weibull_spec, small_data, cfg)
    wall = time.perf_counter() - t0
    assert wall <= 1.5 * max(c.seconds for c in chains)


# targets ---------------------------------------------------------------------------
def test_empty_data_samples_the_prior(small_data):
    spec = ModelSpec(baseline="weibull").resolved(small_data)
    empty = JointDataset(())
    cfg = ChainConfig(n_chains=1, n_iter=3000, n_warmup=500, seed=2)
    d = run_chain(spec, empty, cfg, 0)
    b0 = d.draws[:, 0]
    ess = effective_sample_size(b0[None])
    assert abs(b0.mean()) <= 3 * 10 / math.sqrt(ess)
    assert 7.0 < b0.std() < 13.0


def test_mixed_model_sigma_matches_truth_and_reference(sim200):
    ds, _ = sim200
    spec = ModelSpec(baseline="weibull", survival=False).resolved(ds)
    cfg = ChainConfig(n_chains=2, n_iter=2000, n_warmup=500, seed=3)
    j = spec.layout().log_sigma_y
    sig = np.exp(np.array([run_chain(spec, ds, cfg, k).draws[:, j] for k in range(2)]))
    mean, sd = sig.mean(), sig.std(ddof=1)
    assert abs(mean - 0.6) <= 3 * sd
    Xs = [np.column_stack([np.ones(s.n_obs), spec.ns_basis.evaluate(s.times)]) for s in ds]
    ref = lmm_gibbs(Xs, [s.values for s in ds], 3000, 5)[500:]
    se = math.sqrt(sd ** 2 / effective_sample_size(sig) + ref.var() / effective_sample_size(ref[None]))
    assert abs(mean - ref.mean()) <= 4 * se
    assert abs(sd / ref.std() - 1) < 0.15


def _toy_sampler(small_data, S, **spec_kw):
    spec = ModelSpec(baseline="weibull", **spec_kw).resolved(small_data)
    m = JointModel(spec, small_data)
    th, b = initialize(spec, small_data, 0, 4, model=m)
    rng = np.random.default_rng(11)
    b = rng.normal(0, 0.7, b.shape)
    return m, _Sampler(m, SHORT, th, b, S, np.random.default_rng(12))


@pytest.mark.parametrize("S", [1, 4])
def test_sigma_y_update_matches_conditional(small_data, S):
    m, s = _toy_sampler(small_data, S, survival=False)
    j = m.layout.log_sigma_y
    draws = np.empty(4000)
    for i in range(draws.size):
        s.step_sigma_y()
        draws[i] = s.theta[j]
    # closed form: IG(a/S + N/2, r/S + rss/2) on sigma^2
    rss = float(np.sum((m.y - s.mu) ** 2))
    ig = stats.invgamma(1.0 / S + m.N / 2, scale=1.0 / S + rss / 2)
    assert stats.kstest(np.exp(2 * draws), ig.cdf).pvalue > 1e-3
    # numeric oracle: the full log posterior along log sigma_y
    th = s.theta.copy()

    def logp(x):
        th[j] = x
        return m.log_posterior(th, s.b, S)

    grid = np.linspace(draws.min() - 0.05, draws.max() + 0.05, 2001)
    assert _ks_against_grid(draws, logp, grid) < 1.63 / math.sqrt(draws.size)


@pytest.mark.parametrize("S", [1, 3])
def test_sigma_b_update_matches_conditional_scalar(small_data, S):
    m, s = _toy_sampler(small_data, S, random_effects=("intercept",))
    j = m.layout.chol.start
    draws = np.empty(4000)
    for i in range(draws.size):
        s.step_sigma_b()
        draws[i] = s.theta[j]
    th = s.theta.copy()

    def logp(x):
        th[j] = x
        return m.log_posterior(th, s.b, S)

    grid = np.linspace(draws.min() - 0.2, draws.max() + 0.2, 2001)
    ess = effective_sample_size(draws[None]) if S > 1 else draws.size
    assert _ks_against_grid(draws, logp, grid) < 1.63 / math.sqrt(ess)


def test_sigma_b_update_inverse_wishart_mean(small_data):
    m, s = _toy_sampler(small_data, 1)
    q, n = m.q, m.n
    draws = np.empty((3000, q, q))
    for i in range(draws.shape[0]):
        s.step_sigma_b()
        draws[i] = m.layout.covariance(s.theta)
    scale = np.eye(q) + s.b.T @ s.b
    df = q + 1 + n
    mean = scale / (df - q - 1)
    var = ((df - q + 1) * scale ** 2 + (df - q - 1) * np.outer(np.diag(scale), np.diag(scale))) / (
        (df - q) * (df - q - 1) ** 2 * (df - q - 3))
    se = np.sqrt(var / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 4 * se)


# expensive -----------------------------------------------------------------------
@pytest.mark.slow
def test_default_config_pspline_fit(capsys):
    ds, _ = simulate_dataset(default_params(), 500, 8)
    spec = ModelSpec().resolved(ds)
    chains = run_subsample(spec, ds, ChainConfig(seed=8))
    assert len(chains) == 3 and all(c.draws.shape == (3000, len(spec.layout())) for c in chains)
    summ = summarize(np.stack([c.draws for c in chains]), transform=spec.layout())
    keep = [j for j, nm in enumerate(summ.names) if not nm.startswith("bh_")]
    bad = [(summ.names[j], round(float(summ.rhat[j]), 3)) for j in keep if not summ.rhat[j] < 1.05]
    with capsys.disabled():
        print(f"\n[R-hat] default P-spline fit, n=500: max {np.nanmax(summ.rhat[keep]):.3f}; "
              f"above 1.05: {bad or 'none'}")


@pytest.mark.slow
def test_alpha_interval_coverage():
    fits = [r for r in study.agreement_study() if r.S == 1 and r.method == "precision"]
    fits += list(study.extra_full_data_fits())
    assert len(fits) == 20 and all(r.error is None for r in fits)
    covered = sum(r.lower["alpha"] <= 0.5 <= r.upper["alpha"] for r in fits)
    print(f"alpha 95% interval covers truth in {covered}/20 fits")
    assert covered >= 16
