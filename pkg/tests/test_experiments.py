import math

import numpy as np
import pytest
import scipy.linalg as la
from scipy.stats import binom

from kcsm.engine import InitialMeasureSpec, Observable
from kcsm.errors import DimensionGuard, FitFailure
from kcsm.experiments import (
    ExperimentConfig,
    constant_prefactor,
    exact_quench_series,
    large_cluster_indicator,
    path_mean_zero,
    run_nonconvergence_ad,
    run_quench_ad,
    run_quench_east,
)
from kcsm.model import build_east_chain
from kcsm.rng import Seed
from kcsm.spectral import build_generator
from kcsm.stats import fit_exponential_rate


def semigroup_oracle(model, f, t_grid):
    """``P_t f`` on every volume configuration from a dense matrix exponential."""
    Q = build_generator(model).rates.toarray()
    n = model.n
    codes = np.arange(2**n)
    cfg = ((codes[:, None] >> np.arange(n)) & 1).astype(np.uint8)
    ext = np.concatenate([cfg, np.tile(model.frozen, (codes.size, 1))], axis=1)
    fv = f(ext)
    return cfg, np.array([la.expm(Q * t) @ fv for t in t_grid])


def jackknife_expectation(pi, n, mu):
    """Exact mean of the bias-corrected two-level term when the inner hits are Binomial(n, pi)."""
    k = np.arange(n + 1)
    g = np.abs(k / n - mu)
    loo = (k / n) * np.abs((k - 1) / (n - 1) - mu) + (1 - k / n) * np.abs(k / (n - 1) - mu)
    J = n * g - (n - 1) * loo
    return binom.pmf(k[None, :], n, np.asarray(pi)[:, None]) @ J


# -- rate fitting ---------------------------------------------------------------


def test_fit_recovers_exact_series():
    t = np.arange(12.0)
    fit = fit_exponential_rate([(s, 2.5 * math.exp(-0.4 * s), 1e-3 * math.exp(-0.4 * s)) for s in t])
    assert fit.rate == pytest.approx(0.4, abs=1e-8)
    assert fit.prefactor == pytest.approx(2.5, rel=1e-8)


def test_fit_with_noise():
    rng = np.random.default_rng(0)
    t = np.arange(12.0)
    v = 1.3 * np.exp(-0.25 * t)
    noisy = v * (1 + 0.05 * rng.standard_normal(t.size))
    fit = fit_exponential_rate(list(zip(t, noisy, 0.05 * v)), tail=False)
    assert fit.rate == pytest.approx(0.25, rel=0.1)


def test_fit_failures():
    with pytest.raises(FitFailure):
        fit_exponential_rate([(t, 1.0, 0.01) for t in range(10)])
    with pytest.raises(FitFailure):
        fit_exponential_rate([(t, 0.01, 0.1) for t in range(10)])


# -- configuration --------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(family="fa1f")
    with pytest.raises(ValueError):
        ExperimentConfig(t_grid=(0.0, 2.0, 1.0))
    with pytest.raises(ValueError):
        ExperimentConfig(n_out=10, n_in=5)
    with pytest.raises(ValueError):
        ExperimentConfig(n_in=1, n_out=500)
    d = ExperimentConfig().to_dict()
    assert d["family"] == "east" and d["p_prime"] == 0.6 and d["n_in"] == 64


def test_constant_prefactor():
    f = Observable.vacancy(0)
    assert constant_prefactor(f, 0.3) == pytest.approx(math.sqrt(0.21) / 0.3)
    g = Observable((0, 1), (1.0, 0.0, 0.0, 0.0))
    assert constant_prefactor(g, 0.5) == pytest.approx(4 * math.sqrt(0.25 * 0.75))


# -- exact series and the estimator --------------------------------------------


def test_exact_series_matches_matrix_exponential():
    m = build_east_chain(4, None, 0.3)
    f = Observable.vacancy(0)
    grid = [0.0, 0.5, 2.0, 7.0]
    cfg, ptf = semigroup_oracle(m, f, grid)
    nu = np.prod(np.where(cfg == 1, 0.6, 0.4), axis=1)
    expected = np.abs(ptf - f.mean(0.3)) @ nu
    got = exact_quench_series(m, InitialMeasureSpec.bernoulli(0.6), f, grid)
    np.testing.assert_allclose(got, expected, atol=1e-12)
    assert got[0] == pytest.approx(0.4 * 0.3 + 0.6 * 0.7)


def test_exact_series_guard():
    with pytest.raises(DimensionGuard):
        exact_quench_series(build_east_chain(13, None, 0.3), InitialMeasureSpec.bernoulli(0.6),
                            Observable.vacancy(0), [1.0])


def test_two_level_estimator_matches_its_exact_expectation():
    p, pp, n_in = 0.3, 0.6, 8
    f = Observable.vacancy(0)
    grid = (0.0, 1.0, 3.0, 6.0)
    cfg = ExperimentConfig("east", 3, p, InitialMeasureSpec.bernoulli(pp), f, grid, 6000, n_in, Seed(11), threads=4)
    res = run_quench_east(cfg)
    conf, ptf = semigroup_oracle(cfg.model(), f, grid)
    nu = np.prod(np.where(conf == 1, pp, 1 - pp), axis=1)
    for i, t in enumerate(grid):
        expected = float(nu @ jackknife_expectation(ptf[i], n_in, f.mean(p)))
        assert abs(res.value[i] - expected) < 4 * res.stderr[i] + 1e-12, t


def test_quench_east_summary():
    f = Observable.vacancy(0)
    cfg = ExperimentConfig("east", 6, 0.3, InitialMeasureSpec.bernoulli(0.6), f, tuple(range(13)), 400, 16,
                           Seed(2), threads=2)
    res = run_quench_east(cfg)
    s = res.summary()
    assert s["C_f"] == pytest.approx(constant_prefactor(f, 0.3))
    assert s["reference_rate"] == pytest.approx(s["gap"] / 2)
    assert s["criteria"]["dominated"]
    assert res.to_csv().splitlines()[0] == "t,value,stderr,n_out,n_in"
    assert len(res.rows()) == 13 and res.rows()[0][3:] == (400, 16)


def test_quench_from_a_fixed_configuration():
    cfg = ExperimentConfig("east", 6, 0.3, InitialMeasureSpec.delta([1, 1, 1, 0, 1, 1]), Observable.vacancy(0),
                           (0.0, 2.0, 4.0), 100, 4, Seed(3))
    res = run_quench_east(cfg)
    assert res.notes["x0"] == 3 and res.notes["t0"] > 0
    # deterministic start: at t = 0 the estimate is exactly |0 - q|
    assert res.value[0] == pytest.approx(0.7) and res.stderr[0] < 1e-12


def test_quench_ad_rejects_percolating_start():
    cfg = ExperimentConfig("ad", 3, 0.3, InitialMeasureSpec.bernoulli(0.3), Observable.vacancy(0), (0.0, 1.0),
                           50, 4, Seed(4))
    with pytest.raises(ValueError):
        run_quench_ad(cfg, initial_config=np.ones(15, np.uint8))
    res = run_quench_ad(cfg, initial_config=np.zeros(15, np.uint8))
    assert res.notes["cluster_size"] == 1 and res.value[0] == pytest.approx(0.3)


def test_family_mismatch():
    with pytest.raises(ValueError):
        run_quench_east(ExperimentConfig("ad", 3))
    with pytest.raises(ValueError):
        run_quench_ad(ExperimentConfig("east", 3))


def test_path_expectation_is_mean_zero():
    for mean, se in path_mean_zero(3, 0.5, 1.5, Observable.vacancy(0), 4, 300, Seed(5)):
        assert abs(mean) < 3 * se + 1e-12


# -- above p_c -------------------------------------------------------------------


def test_large_cluster_indicator():
    f = large_cluster_indicator(3, 2)
    full = np.ones(7 + 8, np.uint8)
    base = np.zeros(15, np.uint8)
    small = base.copy()
    small[[0, 1]] = 1
    three = base.copy()
    three[[0, 1, 4]] = 1
    leaky = base.copy()
    leaky[[0, 2, 6, 14]] = 1  # reaches an occupied frozen vertex
    assert list(f(np.stack([full, base, small, three, leaky]))) == [1, 0, 0, 1, 1]


def test_all_ones_start_never_moves():
    rep = run_nonconvergence_ad(0.3, 1.0, [0.0, 5.0, 20.0], 200, Seed(6), depth=4, ell=8)
    assert np.all(rep.value == 1.0)


def test_persistence_small_run():
    rep = run_nonconvergence_ad(0.3, 0.7, [0.0, 10.0, 30.0], 3000, Seed(7), threads=2)
    s = rep.summary()
    assert rep.theta == pytest.approx(2 - 1 / 0.7)
    assert s["criteria"]["persistent"] and s["criteria"]["mu_f_small"]
    assert rep.to_csv(3000, 1).splitlines()[1].startswith("0,")


def test_nested_depth_events_are_ordered():
    # reaching a deeper level implies reaching every shallower one
    from kcsm.engine import simulate_batch
    from kcsm.model import build_ad_tree
    from kcsm.percolation import theta_limit

    m = build_ad_tree(6, None, 0.3)
    probs = np.concatenate([np.full(m.n, 0.7), np.full(m.n_ext - m.n, theta_limit(0.7))])
    seed = Seed(8)
    streams = seed.spawn_streams(2000)
    snaps = simulate_batch(m, probs, [0.0, 3.0, 10.0], seed, 2000, streams, streams, 1)
    prev = None
    for D in (2, 4, 6):
        cur = large_cluster_indicator(2**D, D)(snaps).mean(axis=0)
        if prev is not None:
            assert np.all(cur <= prev + 1e-12)
        prev = cur
