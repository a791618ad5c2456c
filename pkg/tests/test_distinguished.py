import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kcsm.distinguished import (
    TraceEntry,
    check_region,
    conditional_law_test,
    conditional_path_expectations,
    distinguished_set_batch,
    distinguished_zero_batch,
    outer_boundary,
    track_distinguished_set,
    track_distinguished_zero,
    variance_contraction,
    verify_trace_invariants,
)
from kcsm.engine import EventLog, InitialMeasureSpec, Observable, generate_events, sample_initial, simulate
from kcsm.errors import InvalidDistinguishedRegion, NotAZero
from kcsm.model import BoundaryCondition, build_ad_tree, build_east_chain
from kcsm.rng import Seed


# -- East ---------------------------------------------------------------------


def test_empty_log_constant_path():
    m = build_east_chain(4)
    path = track_distinguished_zero(m, [1, 1, 0, 1], 2, EventLog.from_rings(4, 5.0, []))
    assert path.jumps == () and path.position(5.0) == 2


def test_single_legal_ring_moves_zero():
    m = build_east_chain(4)
    ev = EventLog.from_rings(4, 5.0, [(2, 1.5, 1)])
    path = track_distinguished_zero(m, [1, 1, 0, 0], 2, ev)
    assert path.jumps == ((1.5, 3),)


def test_illegal_ring_does_not_move_zero():
    m = build_east_chain(4)
    ev = EventLog.from_rings(4, 5.0, [(2, 1.5, 0)])
    assert track_distinguished_zero(m, [1, 1, 0, 1], 2, ev).jumps == ()


def test_boundary_zero_never_moves():
    m = build_east_chain(3)
    ev = generate_events(m, 10.0, Seed(1))
    assert track_distinguished_zero(m, [1, 1, 1], 3, ev).jumps == ()


def test_occupied_start_rejected():
    with pytest.raises(NotAZero):
        track_distinguished_zero(build_east_chain(3), [1, 1, 1], 1, EventLog.from_rings(3, 1.0, []))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**40), x0=st.integers(0, 9))
def test_paths_are_unit_increment(seed, x0):
    m = build_east_chain(10, None, 0.4)
    eta = sample_initial(InitialMeasureSpec.equilibrium(), m, Seed(seed))
    eta[x0] = 0
    path = track_distinguished_zero(m, eta, x0, generate_events(m, 8.0, Seed(seed)))
    assert path.violations() == []


def test_paths_unit_increment_many_trajectories():
    _, states, xis = distinguished_zero_batch(4, 0.5, 2.0, 10_000, Seed(4))
    assert np.all(xis >= 4)
    # the distinguished site is empty at the end of every run
    assert np.all(states[np.arange(xis.size), xis] == 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**40), data=st.data())
def test_path_ignores_rings_left_of_the_zero(seed, data):
    """Rings strictly left of the current zero position never change the path."""
    m = build_east_chain(10, None, 0.5)
    x0 = 3
    eta = sample_initial(InitialMeasureSpec.equilibrium(), m, Seed(seed))
    eta[x0] = 0
    ev = generate_events(m, 6.0, Seed(seed))
    path = track_distinguished_zero(m, eta, x0, ev)
    left = np.array([s < path.position(t, before=True) for s, t in zip(ev.sites, ev.times)], dtype=bool)
    coins = ev.coins.copy()
    flip = data.draw(st.lists(st.booleans(), min_size=len(ev), max_size=len(ev)))
    coins[left & np.array(flip, dtype=bool)] ^= 1
    keep = ~(left & np.array(data.draw(st.lists(st.booleans(), min_size=len(ev), max_size=len(ev)))))
    mutated = EventLog(ev.n_sites, ev.horizon, ev.sites[keep], ev.times[keep], coins[keep])
    eta2 = eta.copy()
    eta2[:x0] = data.draw(st.lists(st.integers(0, 1), min_size=x0, max_size=x0))
    assert track_distinguished_zero(m, eta2, x0, mutated) == path


def test_law_test_at_time_zero():
    rep = conditional_law_test("east", 4, 0.5, 0.0, 20_000, seed=Seed(3))
    assert len(rep.rows) == 1 and rep.rows[0].n == 20_000
    r = rep.rows[0]
    # at t = 0 the law is exactly mu; tv_null95 is only a 95% quantile
    assert r.pvalue > 1e-3 and r.tv_distance < 1.5 * r.tv_null95


def test_law_test_reports_undersampled_bins():
    rep = conditional_law_test("east", 4, 0.5, 2.0, 5_000, seed=Seed(3))
    small = [r for r in rep.rows if r.n < 500]
    assert small and all(not r.tested and math.isnan(r.tv_distance) for r in small)
    assert rep.to_csv().splitlines()[0] == "bin_id,n,tv_distance,chi2,pvalue"


def test_east_law_is_product_within_bins():
    rep = conditional_law_test("east", 4, 0.5, 2.0, 100_000, seed=Seed(17))
    # goodness of fit at the 1e-3 level in every tested bin
    assert all(r.pvalue > 1e-3 for r in rep.tested)


def test_conditional_construction_reproduces_the_path():
    # raises if an inner run ever deviates from the outer path
    vals, errs, finals = conditional_path_expectations(3, 0.5, 1.5, Observable.vacancy(0), 4, 200, Seed(6))
    assert vals.shape == (4, 8) and np.all(finals >= 3)


def test_path_conditional_mean_is_mu():
    f = Observable.vacancy(0)
    rows = variance_contraction(4, 0.5, 2.0, f, 6, 400, Seed(8))
    for r in rows:
        assert abs(r["mean"] - f.mean(0.5)) < 3 * r["mean_stderr"] + 1e-12


def test_variance_contraction():
    f = Observable.vacancy(0)
    for t in (1.0, 3.0):
        for r in variance_contraction(4, 0.5, t, f, 5, 400, Seed(9)):
            assert r["variance"] <= r["bound"] + 3 * r["stderr"]


# -- AD -----------------------------------------------------------------------


def _ad_run(seed, depth=5, p=0.3, region=(0, 1, 2), T=4.0):
    m = build_ad_tree(depth, None, p)
    eta = sample_initial(InitialMeasureSpec.equilibrium(), m, Seed(seed))
    eta[[b for b in outer_boundary(frozenset(region)) if b < m.n]] = 0
    return m, track_distinguished_set(m, set(region), eta, generate_events(m, T, Seed(seed)))


def test_region_preconditions():
    m = build_ad_tree(3)
    with pytest.raises(InvalidDistinguishedRegion):
        check_region(m, {0, 3})  # 3 lies below the border vertex 1
    with pytest.raises(InvalidDistinguishedRegion):
        check_region(m, set())
    eta = m.extend(np.ones(m.n, dtype=np.uint8))
    with pytest.raises(InvalidDistinguishedRegion):
        check_region(m, {0}, eta)
    region, border = check_region(m, {0, 1})
    assert border == {2, 3, 4}


def test_no_legal_ring_single_entry():
    m = build_ad_tree(2)
    eta = np.array([1, 0, 0, 1, 1, 1, 1], dtype=np.uint8)  # children of both border sites occupied
    ev = EventLog.from_rings(7, 5.0, [(1, 1.0, 1), (2, 2.0, 1), (0, 3.0, 0)])
    tr = track_distinguished_set(m, {0}, eta, ev)
    assert len(tr.entries) == 1 and tr.entries[0] == TraceEntry(0.0, frozenset({0}), frozenset({1, 2}))


def test_first_legal_ring_updates_volume_and_border():
    m = build_ad_tree(2)
    eta = np.array([1, 0, 0, 0, 0, 1, 1], dtype=np.uint8)
    ev = EventLog.from_rings(7, 5.0, [(2, 0.5, 1), (1, 1.0, 1)])
    tr = track_distinguished_set(m, {0}, eta, ev)
    assert len(tr.entries) == 2
    e = tr.entries[1]
    assert e.time == 1.0 and e.volume == {0, 1} and e.border == {2, 3, 4}
    assert verify_trace_invariants(tr) == []


def test_blocked_border_keeps_trace_constant():
    # frozen-occupied spins two levels below the border: no border site is ever legal
    m = build_ad_tree(1, BoundaryCondition.ones(), 0.4)
    eta = np.array([1, 0, 0], dtype=np.uint8)
    # the border sites 1, 2 have frozen occupied children
    tr = track_distinguished_set(m, {0}, eta, generate_events(m, 50.0, Seed(2)))
    assert len(tr.entries) == 1


@pytest.mark.parametrize("seed", range(30))
def test_honest_traces_have_no_violations(seed):
    _, tr = _ad_run(seed)
    assert verify_trace_invariants(tr) == []


def test_mutated_traces_are_flagged():
    _, tr = _ad_run(5)
    e0 = tr.entries[0]
    b = min(e0.border)
    below = 2 * b + 1
    shared = dataclasses.replace(tr, entries=[TraceEntry(0.0, e0.volume, e0.border | {below})])
    assert "v" in {v.prop for v in verify_trace_invariants(shared, tr.states[:1])}
    states = tr.states.copy()
    states[0, b] = 1
    assert "iv" in {v.prop for v in verify_trace_invariants(tr, states)}
    grow2 = dataclasses.replace(tr, entries=[e0, TraceEntry(1.0, e0.volume | {b, below}, e0.border)])
    props = {v.prop for v in verify_trace_invariants(grow2, tr.states[:1].repeat(2, axis=0))}
    assert {"i", "iii"} <= props
    overlap = dataclasses.replace(tr, entries=[TraceEntry(0.0, e0.volume | {below}, e0.border)])
    assert "vi" in {v.prop for v in verify_trace_invariants(overlap, tr.states[:1])}


def test_set_batch_matches_event_tracking():
    m = build_ad_tree(4, None, 0.3)
    seed = Seed(12)
    region, border, out_t, out_x, count, states = distinguished_set_batch(m, {0}, 3.0, 40, seed)
    for i in range(40):
        s = seed.spawn(i)
        eta = sample_initial(InitialMeasureSpec.bernoulli(0.3), m, s)
        eta[[1, 2]] = 0
        ev = generate_events(m, 3.0, s)
        tr = track_distinguished_set(m, {0}, eta, ev)
        assert [e.time for e in tr.entries[1:]] == list(out_t[i, : count[i]])
        assert np.array_equal(simulate(m, eta, ev), states[i, : m.n])


def test_ad_law_is_product_within_bins():
    rep = conditional_law_test("ad", {0}, 0.3, 2.0, 60_000, depth=6, seed=Seed(21))
    assert rep.tested
    assert all(r.pvalue > 1e-4 for r in rep.tested)
