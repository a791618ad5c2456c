"""Distinguished zero (East) and distinguished set of zeros (AD).

Both structures are co-simulated with the spins in a single pass over the
rings.  The East zero at ``xi`` jumps to ``xi + 1`` at the first legal ring
at ``xi``.  The AD border ``B`` gains the two children of a border site and
loses the site itself at the first legal ring there; the site joins the
distinguished volume ``V``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy import stats as sps

from . import rng
from .engine import (
    DEFAULT_SPEED,
    _legal,
    _heapify,
    _ring,
    _ring_keys,
    _sample_state,
    _sift_down,
    _start_clocks,
    run_chunks,
    truncation_window,
)
from .errors import InvalidDistinguishedRegion, NotAZero, ShapeError
from .model import EAST, SEGMENT, TREE, BoundaryCondition, build_ad_tree, build_east_chain
from .rng import Seed, stream_key, uniform
from .spectral import east_gap
from .stats import total_variation

TV_EXHAUSTIVE_MAX = 6

# -- kernels -------------------------------------------------------------------


@nb.njit(cache=True)
def _zero_step(state, nbr, table, x, coin, xi):
    """Process one ring; returns the new distinguished position."""
    legal = _legal(state, nbr, table, x)
    if legal:
        state[x] = coin
        if x == xi:
            return nbr[x, 0]
    return xi


@nb.njit(cache=True)
def _zero_events(state, nbr, table, sites, times, coins, xi, jt, jx):
    m = 0
    for i in range(sites.shape[0]):
        x = sites[i]
        new = _zero_step(state, nbr, table, x, coins[i], xi)
        if new != xi:
            jt[m] = times[i]
            jx[m] = new
            m += 1
            xi = new
    return m


@nb.njit(cache=True)
def _zero_run(state, nbr, table, keys, p, horizon, xi, jt, jx):
    n = nbr.shape[0]
    next_t = np.empty(n)
    counter = np.empty(n, dtype=np.int64)
    heap = np.empty(n, dtype=np.int64)
    _start_clocks(keys, next_t, counter, heap)
    m = 0
    while True:
        x = heap[0]
        t = next_t[x]
        if t > horizon:
            break
        legal = _ring(state, nbr, table, keys, p, next_t, counter, x)
        if legal and x == xi:
            xi = nbr[x, 0]
            if m < jt.shape[0]:
                jt[m] = t
                jx[m] = xi
            m += 1
        _sift_down(heap, next_t, 0, n)
    return xi, m


@nb.njit(cache=True, nogil=True)
def _batch_zero(nbr, table, labels, probs, p, horizon, xi0, seed, streams, out_state, out_xi):
    n = nbr.shape[0]
    state = np.empty(labels.shape[0], dtype=np.uint8)
    keys = np.empty(n, dtype=np.uint64)
    jt = np.empty(0)
    jx = np.empty(0, dtype=np.int64)
    for i in range(streams.shape[0]):
        _sample_state(state, seed, streams[i], labels, probs)
        _ring_keys(keys, seed, streams[i], labels)
        xi, _ = _zero_run(state, nbr, table, keys, p, horizon, xi0, jt, jx)
        out_state[i, :] = state
        out_xi[i] = xi


JUMP_COIN = 1 << 40  # counter slot of the inner coin used at the ring where the zero leaves a site


@nb.njit(cache=True)
def _draw_next(keys_a, keys_b, switch_t, phase, counter, next_t, x, t_now):
    """Next ring of ``x`` after ``t_now``; outer stream before ``switch_t[x]``, inner after."""
    c = counter[x]
    if phase[x] == 0:
        t = t_now - math.log(uniform(keys_a[x], 2 * c))
        if t <= switch_t[x]:
            next_t[x] = t
            return
        phase[x] = 1
        counter[x] = 0
        c = 0
        t_now = switch_t[x]
    next_t[x] = t_now - math.log(uniform(keys_b[x], 2 * c))


@nb.njit(cache=True, nogil=True)
def _batch_switch(nbr, table, state0, keys_a, labels, switch_t, p, horizon, xi0, seed, streams, out_state, out_xi):
    """Conditional construction: resample every ring at a site once the zero has passed it."""
    n = nbr.shape[0]
    next_t = np.empty(n)
    counter = np.empty(n, dtype=np.int64)
    phase = np.empty(n, dtype=np.uint8)
    heap = np.empty(n, dtype=np.int64)
    keys_b = np.empty(n, dtype=np.uint64)
    state = np.empty_like(state0)
    for i in range(streams.shape[0]):
        state[:] = state0
        _ring_keys(keys_b, seed, streams[i], labels)
        for x in range(n):
            counter[x] = 0
            phase[x] = 0
            heap[x] = x
            _draw_next(keys_a, keys_b, switch_t, phase, counter, next_t, x, 0.0)
        _heapify(heap, next_t, n)
        xi = xi0
        while True:
            x = heap[0]
            t = next_t[x]
            if t > horizon:
                break
            c = counter[x]
            if phase[x] == 0 and t == switch_t[x]:
                u = uniform(keys_b[x], JUMP_COIN)
            elif phase[x] == 0:
                u = uniform(keys_a[x], 2 * c + 1)
            else:
                u = uniform(keys_b[x], 2 * c + 1)
            if _legal(state, nbr, table, x):
                state[x] = 1 if u < p else 0
                if x == xi:
                    xi = nbr[x, 0]
            counter[x] = c + 1
            _draw_next(keys_a, keys_b, switch_t, phase, counter, next_t, x, t)
            _sift_down(heap, next_t, 0, n)
        out_state[i, :] = state
        out_xi[i] = xi


@nb.njit(cache=True)
def _set_ring(state, nbr, table, x, coin, t, in_b, in_v, tt, tx, snaps, m):
    legal = _legal(state, nbr, table, x)
    if legal:
        state[x] = coin
    if legal and in_b[x]:
        in_b[x] = False
        in_v[x] = True
        in_b[nbr[x, 0]] = True
        in_b[nbr[x, 1]] = True
        if m < tt.shape[0]:
            tt[m] = t
            tx[m] = x
            if m < snaps.shape[0]:
                snaps[m, :] = state
        return m + 1
    return m


@nb.njit(cache=True)
def _set_events(state, nbr, table, sites, times, coins, in_b, in_v, tt, tx, snaps):
    m = 0
    for i in range(sites.shape[0]):
        m = _set_ring(state, nbr, table, sites[i], coins[i], times[i], in_b, in_v, tt, tx, snaps, m)
    return m


@nb.njit(cache=True)
def _set_run(state, nbr, table, keys, labels, p, horizon, in_b, in_v, tt, tx, snaps, seed, surgery_stream, surgery):
    n = nbr.shape[0]
    next_t = np.empty(n)
    counter = np.empty(n, dtype=np.int64)
    heap = np.empty(n, dtype=np.int64)
    _start_clocks(keys, next_t, counter, heap)
    m = 0
    while True:
        x = heap[0]
        t = next_t[x]
        if t > horizon:
            break
        c = counter[x]
        coin = 1 if uniform(keys[x], 2 * c + 1) < p else 0
        m_new = _set_ring(state, nbr, table, x, coin, t, in_b, in_v, tt, tx, snaps, m)
        counter[x] = c + 1
        next_t[x] = t - math.log(uniform(keys[x], 2 * c + 2))
        if surgery and m_new > m:
            # fresh randomness for every site of the distinguished volume after t
            for y in range(n):
                if in_v[y]:
                    keys[y] = stream_key(seed, surgery_stream, rng.SURGERY + m_new, labels[y])
                    counter[y] = 0
                    next_t[y] = t - math.log(uniform(keys[y], 0))
            _heapify(heap, next_t, n)
        else:
            _sift_down(heap, next_t, 0, n)
        m = m_new
    return m


@nb.njit(cache=True, nogil=True)
def _batch_set(nbr, table, labels, probs, p, horizon, b0, v0, seed, streams, surgery_streams, surgery,
               out_t, out_x, out_count, out_state):
    n = nbr.shape[0]
    n_ext = labels.shape[0]
    state = np.empty(n_ext, dtype=np.uint8)
    keys = np.empty(n, dtype=np.uint64)
    in_b = np.empty(n_ext, dtype=np.bool_)
    in_v = np.empty(n_ext, dtype=np.bool_)
    snaps = np.empty((0, n_ext), dtype=np.uint8)
    for i in range(streams.shape[0]):
        _sample_state(state, seed, streams[i], labels, probs)
        _ring_keys(keys, seed, streams[i], labels)
        in_b[:] = b0
        in_v[:] = v0
        out_count[i] = _set_run(state, nbr, table, keys, labels, p, horizon, in_b, in_v, out_t[i], out_x[i],
                                snaps, seed, surgery_streams[i], surgery)
        out_state[i, :] = state


# -- East: distinguished zero ----------------------------------------------------


@dataclass(frozen=True)
class ZeroPath:
    x0: int
    jumps: tuple[tuple[float, int], ...] = ()

    def position(self, t, before=False):
        """``xi_t``, or ``xi_{t-}`` with ``before``."""
        pos = self.x0
        for s, x in self.jumps:
            if s < t or (s == t and not before):
                pos = x
        return pos

    @property
    def final(self):
        return self.jumps[-1][1] if self.jumps else self.x0

    def violations(self):
        out = []
        prev_t, prev_x = -math.inf, self.x0
        for s, x in self.jumps:
            if x != prev_x + 1:
                out.append(f"jump to {x} from {prev_x} is not a unit step")
            if not s > prev_t:
                out.append(f"jump time {s} not after {prev_t}")
            prev_t, prev_x = s, x
        return out


def _require_east(model):
    if model.topology.kind != SEGMENT or model.rule != EAST:
        raise ShapeError("distinguished zero needs an East segment model")


def track_distinguished_zero(model, eta0, x0, events, T=None):
    """Path of the zero made distinguished at ``x0`` (``x0 == n`` is the frozen boundary zero)."""
    _require_east(model)
    n = model.n
    ext = model.extend(eta0)
    if not 0 <= x0 <= n:
        raise ShapeError(f"x0={x0} outside [0, {n}]")
    if ext[x0] != 0:
        raise NotAZero(f"site {x0} is occupied")
    T = events.horizon if T is None else T
    keep = events.times <= T
    jt = np.empty(n + 1)
    jx = np.empty(n + 1, dtype=np.int64)
    m = _zero_events(ext, model.neighbours, model.table, events.sites[keep], events.times[keep],
                     events.coins[keep], np.int64(x0), jt, jx)
    return ZeroPath(int(x0), tuple((float(jt[i]), int(jx[i])) for i in range(m)))


def east_lemma_window(length, t, M=DEFAULT_SPEED):
    """Window holding ``V0 = [0, length)``, the zero at ``length`` and room to its right."""
    return truncation_window("east", range(0, length + 1), t, M)


def distinguished_zero_batch(length, p, t, n_samples, seed=Seed(), M=DEFAULT_SPEED, threads=1):
    """Final states and ``xi_t`` for trajectories started from mu with a zero at ``length``."""
    window = east_lemma_window(length, t, M)
    model = window.model(p)
    probs = np.concatenate([np.full(model.n, p), model.frozen.astype(float)])
    probs[length] = 0.0
    streams = seed.spawn_streams(n_samples)
    states = np.empty((n_samples, model.n_ext), dtype=np.uint8)
    xis = np.empty(n_samples, dtype=np.int64)
    nbr, table, labels = model.neighbours, model.table, model.labels
    s = rng.as_word(seed.seed)

    def work(a, b):
        _batch_zero(nbr, table, labels, probs, p, float(t), np.int64(length), s, streams[a:b], states[a:b], xis[a:b])

    run_chunks(work, n_samples, threads)
    return model, states, xis


def conditional_path_expectations(length, p, t, f, n_paths, n_inner, seed=Seed(), M=DEFAULT_SPEED):
    """``E(f(eta_t) | path, eta0 on V0)`` for every ``eta0`` on ``V0 = [0, length)``.

    Returns ``(values, stderrs, paths_final)`` with ``values`` of shape
    ``(n_paths, 2**length)``; see ``_conditional_runs``.
    """
    runs, finals = _conditional_runs(length, p, t, f, n_paths, n_inner, seed, M)
    return runs.mean(axis=2), runs.std(axis=2, ddof=1) / math.sqrt(n_inner), finals


def _conditional_runs(length, p, t, f, n_paths, n_inner, seed=Seed(), M=DEFAULT_SPEED):
    """``E(f(eta_t) | path, eta0 on V0)`` for every ``eta0`` on ``V0 = [0, length)``.

    For each of ``n_paths`` sampled paths the distinguished-zero path and
    the spins at and right of ``length`` are fixed by an outer stream.
    Every ring at a site the zero has already passed, and the coin of the
    ring at which it leaves that site, are resampled from ``n_inner``
    inner streams (the conditional graphical construction).  This
    conditions on the outer randomness, a refinement of the path.
    The same inner streams serve every ``eta0``.  Returns ``(runs, finals)``
    with ``f`` per inner run in ``runs`` of shape ``(n_paths, 2**length, n_inner)``.
    """
    window = east_lemma_window(length, t, M)
    model = window.model(p)
    n = model.n
    nbr, table, labels = model.neighbours, model.table, model.labels
    s = rng.as_word(seed.seed)
    runs = np.empty((n_paths, 2**length, n_inner))
    finals = np.empty(n_paths, dtype=np.int64)
    outer = seed.spawn_streams(n_paths)
    for k in range(n_paths):
        probs = np.concatenate([np.full(n, p), model.frozen.astype(float)])
        probs[length] = 0.0
        base = np.empty(model.n_ext, dtype=np.uint8)
        _sample_state(base, s, outer[k], labels, probs)
        keys_a = np.empty(n, dtype=np.uint64)
        _ring_keys(keys_a, s, outer[k], labels)
        jt = np.empty(n + 1)
        jx = np.empty(n + 1, dtype=np.int64)
        probe = base.copy()
        xi, m = _zero_run(probe, nbr, table, keys_a.copy(), p, float(t), np.int64(length), jt, jx)
        switch = np.full(n, np.inf)
        switch[:length] = 0.0
        for j in range(m):
            switch[jx[j] - 1] = jt[j]
        finals[k] = xi
        inner = Seed(seed.seed, int(outer[k])).spawn_streams(n_inner)
        for code in range(2**length):
            state0 = base.copy()
            state0[:length] = (code >> np.arange(length)) & 1
            out = np.empty((n_inner, model.n_ext), dtype=np.uint8)
            out_xi = np.empty(n_inner, dtype=np.int64)
            _batch_switch(nbr, table, state0, keys_a, labels, switch, p, float(t), np.int64(length), s, inner,
                          out, out_xi)
            if np.any(out_xi != xi):
                raise AssertionError("conditional construction changed the distinguished path")
            runs[k, code] = f(out)
    return runs, finals


# -- AD: distinguished set -------------------------------------------------------


@dataclass(frozen=True)
class TraceEntry:
    time: float
    volume: frozenset
    border: frozenset


@dataclass
class DistinguishedSetTrace:
    region: frozenset
    entries: list[TraceEntry]
    states: np.ndarray | None = field(default=None, repr=False)  # extended config after each entry

    @property
    def times(self):
        return [e.time for e in self.entries]

    @property
    def added(self):
        return [next(iter(b.volume - a.volume)) if len(b.volume - a.volume) == 1 else None
                for a, b in zip(self.entries, self.entries[1:])]


def outer_boundary(volume):
    """Vertices outside ``volume`` whose parent is in ``volume``."""
    return frozenset(c for x in volume for c in (2 * x + 1, 2 * x + 2) if c not in volume)


def check_region(model, region, ext_state=None):
    """Validate the subtree-disjointness and empty-border hypotheses."""
    topo = model.topology
    if topo.kind != TREE:
        raise InvalidDistinguishedRegion("distinguished set needs a tree model")
    region = frozenset(int(x) for x in region)
    if not region or any(not 0 <= x < model.n for x in region):
        raise InvalidDistinguishedRegion("region must be a nonempty subset of the volume")
    border = outer_boundary(region)
    for x in region:
        for b in border:
            if topo.is_ancestor_or_self(b, x):
                raise InvalidDistinguishedRegion(f"region vertex {x} lies below border vertex {b}")
    if ext_state is not None:
        bad = sorted(b for b in border if ext_state[b] != 0)
        if bad:
            raise InvalidDistinguishedRegion(f"border vertices {bad} are not empty")
    return region, border


def _masks(model, region):
    region, border = check_region(model, region)
    b0 = np.zeros(model.n_ext, dtype=bool)
    v0 = np.zeros(model.n_ext, dtype=bool)
    b0[list(border)] = True
    v0[list(region)] = True
    return region, border, b0, v0


def _trace_from_arrays(region, border, times, sites, states=None):
    V, B = set(region), set(border)
    entries = [TraceEntry(0.0, frozenset(V), frozenset(B))]
    for t, x in zip(times, sites):
        x = int(x)
        V.add(x)
        B.discard(x)
        B.update((2 * x + 1, 2 * x + 2))
        entries.append(TraceEntry(float(t), frozenset(V), frozenset(B)))
    return DistinguishedSetTrace(frozenset(region), entries, states)


def track_distinguished_set(model, region, eta0, events, T=None):
    """Distinguished volume/border trace of one trajectory, with the state after every entry."""
    ext = model.extend(eta0)
    region, border = check_region(model, region, ext)
    _, _, b0, v0 = _masks(model, region)
    init = ext.copy()
    T = events.horizon if T is None else T
    keep = events.times <= T
    cap = model.n + 1
    tt = np.empty(cap)
    tx = np.empty(cap, dtype=np.int64)
    snaps = np.empty((cap, model.n_ext), dtype=np.uint8)
    m = _set_events(ext, model.neighbours, model.table, events.sites[keep], events.times[keep],
                    events.coins[keep], b0, v0, tt, tx, snaps)
    states = np.concatenate([init[None, :], snaps[:m]])
    return _trace_from_arrays(region, border, tt[:m], tx[:m], states)


def distinguished_set_batch(model, region, t, n_samples, seed=Seed(), surgery=False, probs=None,
                            threads=1, surgery_seed=None):
    """Trace times/sites for many trajectories started from mu with an empty border."""
    region, border, b0, v0 = _masks(model, region)
    if probs is None:
        probs = np.concatenate([np.full(model.n, model.p), model.frozen.astype(float)])
        probs[[b for b in border if b < model.n]] = 0.0
    streams = seed.spawn_streams(n_samples)
    sseed = surgery_seed if surgery_seed is not None else Seed(seed.seed, seed.stream ^ 0x5EED)
    surgery_streams = sseed.spawn_streams(n_samples)
    cap = model.n + 1
    out_t = np.full((n_samples, cap), np.nan)
    out_x = np.full((n_samples, cap), -1, dtype=np.int64)
    count = np.empty(n_samples, dtype=np.int64)
    states = np.empty((n_samples, model.n_ext), dtype=np.uint8)
    nbr, table, labels = model.neighbours, model.table, model.labels
    s = rng.as_word(seed.seed)

    def work(a, b):
        _batch_set(nbr, table, labels, probs, model.p, float(t), b0, v0, s, streams[a:b], surgery_streams[a:b],
                   bool(surgery), out_t[a:b], out_x[a:b], count[a:b], states[a:b])

    run_chunks(work, n_samples, threads)
    return region, border, out_t, out_x, count, states


@dataclass(frozen=True)
class Violation:
    entry: int
    prop: str
    detail: str


class _TreeMasks:
    def __init__(self, n_ext):
        self.n_ext = n_ext
        self.levels = []
        lo = 0
        while lo < n_ext:
            hi = min(2 * lo + 1, n_ext)
            self.levels.append(np.arange(lo, hi))
            lo = hi

    def mask(self, ids):
        m = np.zeros(self.n_ext, dtype=bool)
        ids = [i for i in ids if 0 <= i < self.n_ext]
        m[ids] = True
        return m

    def down_closure(self, m):
        """Mask of every vertex lying in the subtree of some vertex of ``m``."""
        m = m.copy()
        for lev in self.levels[1:]:
            m[lev] |= m[(lev - 1) // 2]
        return m

    def children_of(self, m):
        out = np.zeros(self.n_ext, dtype=bool)
        idx = np.flatnonzero(m)
        for c in (2 * idx + 1, 2 * idx + 2):
            out[c[c < self.n_ext]] = True
        return out


def verify_trace_invariants(trace, states=None, n_ext=None):
    """Check properties (i)-(vi) at every entry; returns the list of violations.

    (vii) is distributional and is tested by the surgery experiment.
    """
    states = trace.states if states is None else states
    if n_ext is None:
        n_ext = states.shape[1] if states is not None else 2 * (max(max(e.border) for e in trace.entries) + 1)
    tm = _TreeMasks(n_ext)
    out = []
    lam = tm.mask(trace.region)
    lam_border = tm.mask(outer_boundary(trace.region))
    below_border = tm.down_closure(lam_border)
    allowed = lam | below_border
    prev = None
    for i, e in enumerate(trace.entries):
        V = tm.mask(e.volume)
        B = tm.mask(e.border)
        if prev is not None:
            if not prev.volume <= e.volume:
                out.append(Violation(i, "i", "volume shrank"))
            elif len(e.volume - prev.volume) != 1:
                out.append(Violation(i, "i", f"volume grew by {len(e.volume - prev.volume)} sites"))
            if not e.time > prev.time:
                out.append(Violation(i, "i", "entry times not increasing"))
        if np.any(V & ~allowed):
            out.append(Violation(i, "ii", f"volume leaves the region and its border subtrees: {np.flatnonzero(V & ~allowed)}"))
        border_of_v = tm.children_of(V) & ~V
        if not np.array_equal(border_of_v, B):
            out.append(Violation(i, "iii", "border differs from the outer boundary of the volume"))
        if np.any(B & ~below_border):
            out.append(Violation(i, "iii", "border leaves the border subtrees"))
        if states is not None and np.any(states[i][B] != 0):
            out.append(Violation(i, "iv", f"occupied border sites {np.flatnonzero(B & (states[i] != 0))}"))
        strict_below_b = tm.down_closure(tm.children_of(B))
        if np.any(B & strict_below_b):
            out.append(Violation(i, "v", "two border sites share a root-to-leaf path"))
        if np.any(tm.down_closure(B) & V):
            out.append(Violation(i, "vi", "border subtrees meet the volume"))
        prev = e
    return out


# -- conditional law tests ---------------------------------------------------------


@dataclass(frozen=True)
class BinRow:
    bin_id: str
    n: int
    tv_distance: float
    chi2: float
    pvalue: float
    tested: bool
    method: str
    tv_null95: float  # 95% quantile of the TV of a product-law sample of the same size

    def csv(self):
        return f"{self.bin_id},{self.n},{self.tv_distance:.6g},{self.chi2:.6g},{self.pvalue:.6g}"


@dataclass
class LawReport:
    rows: list[BinRow]
    min_count: int

    @property
    def tested(self):
        return [r for r in self.rows if r.tested]

    def max_tv(self):
        return max((r.tv_distance for r in self.tested), default=0.0)

    def to_csv(self):
        return "bin_id,n,tv_distance,chi2,pvalue\n" + "".join(r.csv() + "\n" for r in self.rows)


def _product_probs(k, p):
    codes = np.arange(2**k)
    ones = np.array([bin(c).count("1") for c in codes])
    return p**ones * (1 - p) ** (k - ones)


def _null_tv_quantile(n, probs, gen, reps=200):
    draws = gen.multinomial(n, probs, size=reps)
    tvs = 0.5 * np.abs(draws / n - probs).sum(axis=1)
    return float(np.quantile(tvs, 0.95))


def _bin_row(bin_id, configs, p, min_count, gen):
    """Compare the rows of ``configs`` (n, k) with the product Bernoulli(p) law."""
    n, k = configs.shape
    if n < min_count:
        return BinRow(bin_id, n, math.nan, math.nan, math.nan, False, "undersampled", math.nan)
    if k <= TV_EXHAUSTIVE_MAX:
        codes = (configs.astype(np.int64) << np.arange(k)).sum(axis=1)
        counts = np.bincount(codes, minlength=2**k)
        probs = _product_probs(k, p)
        tv = total_variation(counts, probs)
        res = sps.chisquare(counts, n * probs)
        return BinRow(bin_id, n, tv, float(res.statistic), float(res.pvalue), True, "joint",
                      _null_tv_quantile(n, probs, gen))
    # marginal and pairwise laws only
    phat = configs.mean(axis=0)
    tv = float(np.max(np.abs(phat - p)))
    pair_probs = _product_probs(2, p)
    for a in range(k):
        for b in range(a + 1, k):
            codes = configs[:, a].astype(np.int64) + 2 * configs[:, b].astype(np.int64)
            tv = max(tv, total_variation(np.bincount(codes, minlength=4), pair_probs))
    chi2 = float(np.sum((phat * n - n * p) ** 2 / (n * p * (1 - p))))
    null = gen.binomial(n, p, size=(200, k)) / n
    null_tv = float(np.quantile(np.abs(null - p).max(axis=1), 0.95))
    return BinRow(bin_id, n, tv, chi2, float(sps.chi2.sf(chi2, k)), True, "marginal+pairwise", null_tv)


def conditional_law_test(family, region, p, t, n_samples, bin_policy="endpoint", seed=Seed(), min_count=500,
                         M=DEFAULT_SPEED, depth=None, threads=1):
    """Bin trajectories by the distinguished structure at ``t`` and test the law inside it.

    ``family='east'``: ``region`` is the length of ``V0 = [0, region)``, the
    zero sits at ``region``.  ``family='ad'``: ``region`` is a vertex set
    of a tree of the given ``depth`` (default: truncation window depth);
    bins are the final volume ``V_t`` (``bin_policy='endpoint'``) or the
    ordered sequence of added sites (``'path'``).
    """
    gen = Seed(seed.seed, seed.stream ^ 0xB00).generator()
    groups = defaultdict(list)
    if family == "east":
        length = int(region)
        _, states, xis = distinguished_zero_batch(length, p, t, n_samples, seed, M, threads)
        for xi in np.unique(xis):
            sel = states[xis == xi][:, :xi]
            groups[f"xi={xi}"] = sel
    elif family == "ad":
        region = frozenset(region)
        if depth is None:
            depth = truncation_window("ad", region, t, M).depth
        model = build_ad_tree(depth, None, p)
        region, border, out_t, out_x, count, states = distinguished_set_batch(model, region, t, n_samples, seed,
                                                                              threads=threads)
        keys = {}
        for i in range(n_samples):
            added = tuple(int(x) for x in out_x[i, : count[i]])
            key = added if bin_policy == "path" else tuple(sorted(region | set(added)))
            keys.setdefault(key, []).append(i)
        for key, idx in keys.items():
            vol = sorted(region | set(key)) if bin_policy == "path" else list(key)
            groups["V=" + "|".join(map(str, key))] = states[np.asarray(idx)][:, vol]
    else:
        raise ValueError(f"unknown family {family!r}")
    rows = [_bin_row(bid, cfg, p, min_count, gen) for bid, cfg in sorted(groups.items(), key=lambda kv: -len(kv[1]))]
    return LawReport(rows, min_count)


def variance_contraction(length, p, t, f, n_paths, n_inner, seed=Seed(), M=DEFAULT_SPEED):
    """Per path: noise-corrected ``Var_mu(E(f(eta_t)|path))`` and its bound ``e^{-2 gap t} Var_mu(f)``.

    The gap is that of the East segment ``[0, xi_t)`` with a zero boundary,
    the smallest of the gaps met along the path.
    """
    runs, finals = _conditional_runs(length, p, t, f, n_paths, n_inner, seed, M)
    vals, errs = runs.mean(axis=2), runs.std(axis=2, ddof=1) / math.sqrt(n_inner)
    w = _product_probs(length, p)
    rows = []
    for k in range(n_paths):
        mean = np.dot(w, vals[k])
        # inner streams are shared across eta0, so the mean's error comes from the weighted runs
        mean_se = float(np.std(w @ runs[k], ddof=1) / math.sqrt(n_inner))
        var = np.dot(w, (vals[k] - mean) ** 2) - np.dot(w, errs[k] ** 2) + mean_se**2
        noise = math.sqrt(2 * np.dot(w**2, errs[k] ** 4) + 4 * np.dot(w**2, (vals[k] - mean) ** 2 * errs[k] ** 2))
        gap = east_gap(int(finals[k]), p)
        rows.append({"xi_t": int(finals[k]), "variance": float(var), "stderr": noise,
                     "bound": math.exp(-2 * gap * t) * f.variance(p), "gap": gap,
                     "mean": float(mean), "mean_stderr": mean_se})
    return rows
