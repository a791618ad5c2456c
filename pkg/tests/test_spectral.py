import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kcsm.engine import Observable
from kcsm.errors import DimensionGuard, FitFailure
from kcsm.model import UNCONSTRAINED, BoundaryCondition, ConstraintRule, build_ad_tree, build_east_chain, build_segment
from kcsm.rng import Seed
from kcsm.spectral import (
    autocorrelation_rate,
    build_generator,
    east_gap,
    ergodicity_check,
    exact_autocovariance,
    gap_vs_q_scan,
    spectral_gap_discrete,
    spectral_gap_exact,
    spectrum_csv,
)

EAST2_HALF_GAP = 1 - 1 / math.sqrt(2)  # frozen from the hand-built 4x4 oracle below


def east_two_site_rates(p):
    """Generator of East on two sites with a zero boundary, states indexed by bits (b0, b1)."""
    q = 1 - p
    Q = np.zeros((4, 4))
    for s in range(4):
        e0, e1 = s & 1, (s >> 1) & 1
        Q[s, s ^ 2] += q if e1 else p  # site 1 always legal
        if e1 == 0:
            Q[s, s ^ 1] += q if e0 else p
    Q -= np.diag(Q.sum(axis=1))
    return Q


def test_two_site_oracle_matches_frozen_value():
    ev = np.sort(-np.linalg.eigvals(east_two_site_rates(0.5)).real)
    assert ev[1] == pytest.approx(EAST2_HALF_GAP, abs=1e-12)


@pytest.mark.parametrize("p", [0.2, 0.5, 0.7])
def test_two_site_generator_matches_oracle(p):
    gen = build_generator(build_east_chain(2, None, p))
    assert np.allclose(gen.rates.toarray(), east_two_site_rates(p), atol=1e-15)
    ev = np.sort(-np.linalg.eigvals(east_two_site_rates(p)).real)
    assert spectral_gap_exact(gen).gap == pytest.approx(ev[1], abs=1e-12)


def test_single_site_generator_and_gap():
    for p in (0.1, 0.5, 0.9):
        gen = build_generator(build_east_chain(1, None, p))
        assert np.allclose(gen.rates.toarray(), [[-p, p], [1 - p, -(1 - p)]])
        res = spectral_gap_exact(gen)
        assert res.gap == pytest.approx(1.0, abs=1e-12) and res.kernel_dim == 1 and res.ergodic


def test_row_sums_and_symmetry():
    for m in (build_east_chain(6, None, 0.3), build_ad_tree(2, None, 0.6)):
        gen = build_generator(m)
        assert np.max(np.abs(gen.row_sums())) < 1e-12
        S = gen.symmetrized().toarray()
        assert np.max(np.abs(S - S.T)) < 1e-12
        assert np.max(np.linalg.eigvalsh((S + S.T) / 2)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(
    offsets=st.lists(st.sampled_from([-2, -1, 1, 2]), min_size=1, max_size=2, unique=True),
    data=st.data(),
    p=st.floats(0.05, 0.95),
)
def test_detailed_balance_for_custom_rules(offsets, data, p):
    table = data.draw(st.lists(st.integers(0, 1), min_size=2 ** len(offsets), max_size=2 ** len(offsets)))
    gen = build_generator(build_segment(4, ConstraintRule.custom(offsets, table), None, p))
    assert gen.detailed_balance_residual() < 1e-12


def test_dimension_guard():
    with pytest.raises(DimensionGuard):
        build_generator(build_east_chain(25))


def test_gap_nonincreasing_in_length():
    gaps = [east_gap(ell, 0.5) for ell in range(1, 13)]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))


@pytest.mark.parametrize("ell", [4, 7, 10])
def test_gap_nonincreasing_in_density(ell):
    gaps = [east_gap(ell, p) for p in np.arange(1, 10) / 10]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))


@pytest.mark.parametrize("ell,p", [(1, 0.5), (2, 0.5), (3, 0.3), (6, 0.7)])
def test_discrete_relation(ell, p):
    res = spectral_gap_discrete(build_east_chain(ell, None, p))
    assert res.residual < 1e-10
    if ell == 1:
        assert res.discrete.gap == pytest.approx(1.0, abs=1e-12)


def test_ergodicity():
    for ell in range(1, 8):
        assert ergodicity_check(build_generator(build_east_chain(ell, None, 0.6)))
    assert ergodicity_check(build_generator(build_segment(1, UNCONSTRAINED, None, 0.5)))
    blocked = build_generator(build_ad_tree(2, BoundaryCondition.ones(), 0.5))
    assert not ergodicity_check(blocked)
    res = spectral_gap_exact(blocked)
    assert res.kernel_dim > 1 and res.reachable_gap == 0.0  # all-ones is isolated


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
def test_ad_empty_boundary_is_ergodic(p):
    gen = build_generator(build_ad_tree(2, None, p))
    assert ergodicity_check(gen) and spectral_gap_exact(gen).gap > 0


def test_gap_scan_trend():
    rows = gap_vs_q_scan([0.5, 0.25, 0.125])
    assert [r["ell"] for r in rows] == [2, 4, 8]
    assert rows[0]["gap"] == pytest.approx(EAST2_HALF_GAP, abs=1e-12)
    gaps = [r["gap"] for r in rows]
    ratios = [b / a for a, b in zip(gaps, gaps[1:])]
    assert gaps[0] > gaps[1] > gaps[2] and ratios[0] > ratios[1]


def test_low_density_limit():
    # constraints are almost always satisfied: gap -> 1, with a sqrt(p) correction
    for p in (1e-2, 1e-3, 1e-4):
        gap = east_gap(3, p)
        assert 0 < 1 - gap <= 2 * math.sqrt(p)


def test_autocorrelation_single_site():
    m = build_segment(1, UNCONSTRAINED, None, 0.5)
    rate = autocorrelation_rate(m, Observable.spin(0), 3.0, 100_000, Seed(2))
    assert rate == pytest.approx(1.0, rel=0.1)


def test_autocorrelation_east_two_sites():
    m = build_east_chain(2, None, 0.5)
    f = Observable.spin(0)
    _, evals, coef = exact_autocovariance(m, f, [0.0])
    slowest = min(e for e, c in zip(evals, coef) if c > 1e-12 and e > 1e-10)
    rate = autocorrelation_rate(m, f, 6.0, 100_000, Seed(3))
    assert rate == pytest.approx(slowest, rel=0.15)


def test_autocorrelation_of_constant_fails():
    with pytest.raises(FitFailure):
        autocorrelation_rate(build_east_chain(2), Observable.constant(), 2.0, 1000, Seed(1))


def test_spectrum_csv():
    res = spectral_gap_exact(build_generator(build_east_chain(1, None, 0.5)))
    assert spectrum_csv([("east", 0.5, 1, res)]).splitlines()[1] == "east,0.5,1,1,1,1"


def test_sparse_path_agrees_with_dense(monkeypatch):
    import kcsm.spectral as spectral

    m = build_east_chain(8, None, 0.4)
    dense = spectral_gap_exact(build_generator(m))
    monkeypatch.setattr(spectral, "DENSE_MAX_DIM", 2**5)
    sparse = spectral_gap_exact(build_generator(m))
    assert sparse.spectrum is None
    assert sparse.gap == pytest.approx(dense.gap, abs=1e-10) and sparse.kernel_dim == 1
