"""East on ``[0, ell)`` with a zero at ``ell``: zero-capped reachability and hitting times.

Configurations in the search are encoded by their zero set: bit ``x`` is
set when site ``x`` is empty.  Site ``x`` may flip iff ``x + 1`` is empty,
and ``x + 1 == ell`` always is.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from . import rng
from .engine import _legal, run_chunks
from .errors import SearchGuard
from .model import build_east_chain
from .rng import Seed, stream_key, uniform
from .spectral import build_discrete_kernel, spectral_gap_discrete

MAX_STATES = 10**7
OMEGA0_CONSTANT = 0.67


@dataclass(frozen=True)
class ReachabilityResult:
    ell: int
    n: int
    zero_sets: frozenset  # reachable configurations as zero-set bitmasks
    single_zero_positions: tuple

    @property
    def count(self):
        return len(self.zero_sets)

    def configs(self):
        """Reachable configurations as spin arrays, sorted by zero-set code."""
        codes = np.array(sorted(self.zero_sets), dtype=np.int64)
        return (1 - ((codes[:, None] >> np.arange(self.ell)) & 1)).astype(np.uint8)


def _moves(z, ell, n):
    """Zero sets one legal flip away from ``z`` that keep at most ``n`` zeros."""
    zeros = z.bit_count()
    y = z
    sources = [ell]
    while y:
        low = y & -y
        sources.append(low.bit_length() - 1)
        y ^= low
    for s in sources:
        x = s - 1
        if x < 0:
            continue
        w = z ^ (1 << x)
        if w & (1 << x):
            if zeros < n:
                yield w
        else:
            yield w


def reachable_set(ell, n, max_states=MAX_STATES):
    """Breadth-first search from all-ones under the cap of ``n`` zeros."""
    if ell < 1 or n < 0:
        raise ValueError("need ell >= 1 and n >= 0")
    seen = {0}
    todo = deque([0])
    while todo:
        z = todo.popleft()
        for w in _moves(z, ell, n):
            if w not in seen:
                seen.add(w)
                if len(seen) > max_states:
                    raise SearchGuard(f"more than {max_states} reachable states")
                todo.append(w)
    singles = tuple(sorted(z.bit_length() - 1 for z in seen if z and z & (z - 1) == 0))
    return ReachabilityResult(ell, n, frozenset(seen), singles)


def is_closed(result):
    """Every legal capped move from a member stays inside the set."""
    return all(w in result.zero_sets for z in result.zero_sets for w in _moves(z, result.ell, result.n))


def min_single_zero_distance(ell, n):
    """Smallest position of the zero over reachable single-zero configurations."""
    if n < 1 or 2 ** (n - 1) > ell:
        raise ValueError("need n >= 1 and 2^(n-1) <= ell")
    res = reachable_set(ell, n)
    return min(res.single_zero_positions)


def omega0_formula(n):
    return 2.0 ** math.comb(n, 2) * math.factorial(n) * OMEGA0_CONSTANT**n


def stabilized_ell(n):
    """A length past which the capped search no longer sees the left end."""
    return max(1, 2**n)


def count_vs_formula(n_values, ell_rule=stabilized_ell):
    rows = []
    for n in n_values:
        ell = ell_rule(n)
        count = reachable_set(ell, n).count
        formula = omega0_formula(n)
        rows.append({"n": n, "ell": ell, "count": count, "formula": formula, "ratio": count / formula})
    return rows


def quadratic_coefficient(rows):
    n = np.array([r["n"] for r in rows], float)
    y = np.log([r["count"] for r in rows])
    return float(np.polyfit(n, y, 2)[0])


def omega0_table(n_values, ells):
    return [(n, ell, reachable_set(ell, n).count) for n in n_values for ell in ells if ell >= 1]


def omega0_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "ell", "count"])
    w.writerows(table)
    return buf.getvalue()


def read_omega0_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [(int(r["n"]), int(r["ell"]), int(r["count"])) for r in rows]


# -- hitting times of the discrete chain -------------------------------------------


@nb.njit(cache=True)
def _hit_pair(state, nbr, table, p, horizon, key, n_target):
    """First steps with ``n_target`` zeros (T) and with the single zero at 0 (T0); -1 if censored."""
    ell = nbr.shape[0]
    zeros = 0
    for x in range(ell):
        zeros += 1 - state[x]
    T = 0 if zeros >= n_target else -1
    T0 = 0 if zeros == 1 and state[0] == 0 else -1
    for k in range(horizon):
        if T >= 0 and T0 >= 0:
            break
        x = min(np.int64(uniform(key, 2 * k) * ell), ell - 1)
        if _legal(state, nbr, table, x):
            new = 1 if uniform(key, 2 * k + 1) < p else 0
            zeros += np.int64(state[x]) - new
            state[x] = new
        if T < 0 and zeros >= n_target:
            T = k + 1
        if T0 < 0 and zeros == 1 and state[0] == 0:
            T0 = k + 1
    return T, T0


@nb.njit(cache=True, nogil=True)
def _batch_hit(nbr, table, init, p, horizon, seed, streams, n_target, out):
    state = np.empty_like(init)
    for i in range(streams.shape[0]):
        state[:] = init
        key = stream_key(seed, streams[i], rng.DISCRETE, 0)
        T, T0 = _hit_pair(state, nbr, table, p, horizon, key, n_target)
        out[i, 0] = T
        out[i, 1] = T0


@nb.njit(cache=True)
def _hit_target(state, nbr, table, p, horizon, key, target):
    """First step at which ``state[:ell]`` equals ``target``; ``horizon`` if never."""
    ell = nbr.shape[0]
    mism = 0
    for x in range(ell):
        mism += state[x] != target[x]
    if mism == 0:
        return 0
    for k in range(horizon):
        x = min(np.int64(uniform(key, 2 * k) * ell), ell - 1)
        if _legal(state, nbr, table, x):
            new = 1 if uniform(key, 2 * k + 1) < p else 0
            if new != state[x]:
                mism += 1 if state[x] == target[x] else -1
                state[x] = new
        if mism == 0:
            return k + 1
    return horizon


@nb.njit(cache=True, nogil=True)
def _batch_target(nbr, table, extra, labels, p, horizon, seed, streams, target, out):
    ell = nbr.shape[0]
    state = np.empty(ell + extra.shape[0], dtype=np.uint8)
    for i in range(streams.shape[0]):
        for x in range(ell):
            state[x] = 1 if uniform(stream_key(seed, streams[i], rng.INIT, labels[x]), 0) < p else 0
        state[ell:] = extra
        key = stream_key(seed, streams[i], rng.DISCRETE, 0)
        out[i] = _hit_target(state, nbr, table, p, horizon, key, target)


@dataclass
class HittingTimes:
    ell: int
    q: float
    n: int  # floor(log2 ell)
    T: np.ndarray  # -1 where censored
    T0: np.ndarray
    horizon: int

    @property
    def both_observed(self):
        return (self.T >= 0) & (self.T0 >= 0)

    @property
    def n_censored(self):
        return int(np.count_nonzero(~self.both_observed))

    def ordering_violations(self):
        both = self.both_observed
        return int(np.count_nonzero(self.T0[both] < self.T[both]))

    @property
    def t_star(self):
        return 0.5 * self.q ** (-self.n / 2)

    def prob_T_before(self, t):
        """Fraction of runs with ``T < t`` (censored runs count as ``T >= t``)."""
        return float(np.mean((self.T >= 0) & (self.T < t)))

    def summary(self):
        both = self.both_observed
        return {
            "ell": self.ell, "q": self.q, "n": self.n, "runs": int(self.T.size),
            "censored": self.n_censored, "T0_before_T": self.ordering_violations(),
            "mean_T": float(self.T[self.T >= 0].mean()) if np.any(self.T >= 0) else math.nan,
            "mean_T0": float(self.T0[both].mean()) if both.any() else math.nan,
            "t_star": self.t_star, "P(T<t_star)": self.prob_T_before(self.t_star), "proof_bound": 0.5,
        }


def hitting_time_experiment(ell, q, horizon, n_samples, seed=Seed(), threads=1):
    """Discrete chain from all-ones: times T (n zeros present) and T0 (single zero at 0)."""
    if ell < 2:
        raise ValueError("need ell >= 2")
    model = build_east_chain(ell, None, 1.0 - q)
    n = int(math.floor(math.log2(ell)))
    init = np.concatenate([np.ones(ell, np.uint8), model.frozen])
    streams = seed.spawn_streams(n_samples)
    out = np.empty((n_samples, 2), dtype=np.int64)
    s = rng.as_word(seed.seed)

    def work(a, b):
        _batch_hit(model.neighbours, model.table, init, model.p, int(horizon), s, streams[a:b], n, out[a:b])

    run_chunks(work, n_samples, threads)
    return HittingTimes(ell, q, n, out[:, 0].copy(), out[:, 1].copy(), int(horizon))


def _killed_kernel(model, target_code):
    P, w = build_discrete_kernel(model)
    keep = np.ones(P.shape[0], dtype=bool)
    keep[target_code] = False
    idx = np.flatnonzero(keep)
    return P[idx][:, idx].tocsr(), w, idx


def config_code(config):
    config = np.asarray(config, dtype=np.int64)
    return int((config << np.arange(config.size)).sum())


def exact_mean_hitting_time(model, target, start):
    """``E_start[T_target]`` in steps of the discrete chain (linear solve on the killed chain)."""
    tc, sc = config_code(target), config_code(start)
    if tc == sc:
        return 0.0
    K, _, idx = _killed_kernel(model, tc)
    h = sla.spsolve((sp.identity(K.shape[0], format="csc") - K).tocsc(), np.ones(K.shape[0]))
    return float(h[np.searchsorted(idx, sc)])


def exact_survival(model, target, t_values):
    """``P_mu(T_target >= t)`` for integer ``t`` (``T`` counts steps from time 0)."""
    tc = config_code(target)
    K, w, idx = _killed_kernel(model, tc)
    out = []
    v = w[idx].copy()  # mass on paths avoiding the target so far: t = 1
    cur = 1
    for t in sorted(int(x) for x in t_values):
        if t <= 0:
            out.append((t, 1.0))
            continue
        while cur < t:
            v = K.T @ v
            cur += 1
        out.append((t, float(v.sum())))
    return dict(out)


@dataclass(frozen=True)
class BoundRow:
    t: float
    survival: float
    stderr: float
    bound: float
    exact: float

    @property
    def holds(self):
        return self.survival <= self.bound + 3 * self.stderr


def hitting_bound_check(model, target, t_grid, n_samples, seed=Seed(), threads=1):
    """Empirical ``P_mu(T_A >= t)`` against ``exp(-mu(A) gap_d t)`` for the single configuration ``A``."""
    target = np.asarray(target, dtype=np.uint8)
    t_grid = [int(t) for t in t_grid]
    horizon = max(t_grid) + 1
    k = int(target.sum())
    mu_a = model.p**k * model.q ** (model.n - k)
    gap_d = spectral_gap_discrete(model).discrete.gap
    streams = seed.spawn_streams(n_samples)
    out = np.empty(n_samples, dtype=np.int64)
    s = rng.as_word(seed.seed)
    labels = model.labels[: model.n]

    def work(a, b):
        _batch_target(model.neighbours, model.table, model.frozen, labels, model.p, horizon, s, streams[a:b],
                      target, out[a:b])

    run_chunks(work, n_samples, threads)
    exact = exact_survival(model, target, t_grid)
    rows = []
    for t in t_grid:
        surv = float(np.mean(out >= t))
        se = math.sqrt(max(surv * (1 - surv), 1.0 / n_samples) / n_samples)
        rows.append(BoundRow(t, surv, se, math.exp(-mu_a * gap_d * t), exact[t]))
    return rows
