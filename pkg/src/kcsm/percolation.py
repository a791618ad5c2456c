"""Occupied clusters on the rooted binary tree.

Below the root the occupied cluster is a Galton-Watson family with
Binomial(2, p) offspring, so cluster statistics are sampled generation by
generation without building the tree.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DimensionGuard, ShapeError
from .model import TREE, Topology
from .rng import Seed
from .stats import binomial_stderr

EXACT_MAX_N = 2**12
FRONT_CAP = 10**12  # a front this large survives with probability 1 - (1 - theta)^cap for every p > 1/2


@dataclass(frozen=True)
class ClusterStats:
    vertices: frozenset
    depth: int  # truncation depth of the tree
    reached_bottom: bool

    @property
    def size(self):
        return len(self.vertices)


def occupied_cluster(config, x, topology):
    """Vertices joined to ``x`` by a downward path of occupied sites (empty iff ``config[x] == 0``)."""
    if topology.kind != TREE:
        raise ShapeError("occupied clusters are defined on trees")
    config = np.asarray(config)
    size = config.shape[0]
    if not 0 <= x < size:
        raise ShapeError(f"vertex {x} outside a configuration of {size} sites")
    if config[x] == 0:
        return frozenset()
    seen = {x}
    todo = deque([x])
    while todo:
        y = todo.popleft()
        for c in (2 * y + 1, 2 * y + 2):
            if c < size and config[c] == 1 and c not in seen:
                seen.add(c)
                todo.append(c)
    return frozenset(seen)


def cluster_stats(config, x, topology):
    verts = occupied_cluster(config, x, topology)
    bottom = topology.depth + (np.asarray(config).shape[0] > topology.n_vertices)
    reached = any(Topology.level(v) == bottom for v in verts)
    return ClusterStats(verts, bottom, reached)


def theta_exact(p, depth):
    """``P(root cluster reaches level depth)`` from ``u_{k+1} = p (1 - (1 - u_k)^2)``, ``u_0 = p``."""
    u = p
    for _ in range(depth):
        u = p * (1.0 - (1.0 - u) ** 2)
    return u


def theta_limit(p):
    """Percolation probability of the infinite tree."""
    return max(0.0, 2.0 - 1.0 / p) if p > 0 else 0.0


def _generations(p, n_samples, gen):
    z = (gen.random(n_samples) < p).astype(np.int64)
    while True:
        yield z
        alive = z > 0
        z = z.copy()
        z[alive] = gen.binomial(np.minimum(2 * z[alive], FRONT_CAP), p)


def theta_estimate(p, depth, n_samples, seed=Seed()):
    """Monte Carlo ``P(the root cluster reaches level depth)``; returns ``(estimate, stderr)``."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    gen = seed.generator()
    for level, z in enumerate(_generations(p, n_samples, gen)):
        if level == depth:
            break
    hits = int(np.count_nonzero(z))
    return hits / n_samples, binomial_stderr(hits, n_samples)


def progeny_law(p, n_max):
    """``a_n = P(family of an occupied vertex has n members)`` for ``n <= n_max``.

    Root with ``k`` occupied children (prob ``C(2,k) p^k q^(2-k)``) and
    ``k`` independent subfamilies; index 0 is unused.
    """
    if n_max > EXACT_MAX_N:
        raise DimensionGuard(f"exact progeny recursion capped at n = {EXACT_MAX_N}")
    q = 1.0 - p
    a = np.zeros(n_max + 1)
    for n in range(1, n_max + 1):
        v = q * q if n == 1 else 2 * p * q * a[n - 1]
        if n >= 3:
            v += p * p * np.dot(a[1 : n - 1], a[n - 2 : 0 : -1])
        a[n] = v
    return a


def progeny_law_closed_form(p, n_max):
    """Independent oracle: ``a_n = (1/n) C(2n, n-1) p^(n-1) q^(n+1)``."""
    q = 1.0 - p
    out = np.zeros(n_max + 1)
    for n in range(1, n_max + 1):
        logc = math.lgamma(2 * n + 1) - math.lgamma(n) - math.lgamma(n + 2) - math.log(n)
        out[n] = math.exp(logc + (n - 1) * math.log(p) + (n + 1) * math.log(q))
    return out


@dataclass(frozen=True)
class TailRow:
    p: float
    n: int
    ccdf: float
    stderr: float
    method: str

    def csv(self):
        return f"{self.p:g},{self.n},{self.ccdf:.10g},{self.stderr:.6g},{self.method}"


TAIL_HEADER = "p,n,ccdf,stderr,method"


def cluster_sizes(p, n_samples, cap, seed=Seed()):
    """Root cluster sizes, truncated at ``cap`` (a value of ``cap`` means ``>= cap``)."""
    gen = seed.generator()
    size = np.zeros(n_samples, dtype=np.int64)
    for z in _generations(p, n_samples, gen):
        size += z
        z[size >= cap] = 0
        if not z.any():
            break
    return np.minimum(size, cap)


def cluster_tail(p, n_values, n_samples=None, exact=True, seed=Seed()):
    """``P(|C_0| >= n)`` for every ``n`` in ``n_values``, exactly or by Monte Carlo."""
    ns = [int(n) for n in n_values]
    if not ns or min(ns) < 1:
        raise ValueError("n values must be positive")
    if exact:
        a = progeny_law(p, max(ns))
        cum = np.concatenate([[0.0], np.cumsum(a[1:])])
        return [TailRow(p, n, p * (1.0 - cum[n - 1]), 0.0, "exact") for n in ns]
    if not n_samples:
        raise ValueError("Monte Carlo mode needs n_samples")
    sizes = cluster_sizes(p, n_samples, max(ns), seed)
    rows = []
    for n in ns:
        k = int(np.count_nonzero(sizes >= n))
        rows.append(TailRow(p, n, k / n_samples, binomial_stderr(k, n_samples), "mc"))
    return rows


def depth_tail(p, levels):
    """``P(root cluster reaches level l)`` for every ``l`` (exact)."""
    return [theta_exact(p, int(l)) for l in levels]


def tail_exponent(rows):
    """Fitted slope of ``log ccdf`` against ``log n``."""
    n = np.array([r.n for r in rows], float)
    c = np.array([r.ccdf for r in rows], float)
    return float(np.polyfit(np.log(n), np.log(c), 1)[0])


def tail_decay_rate(rows):
    """Fitted ``beta`` in ``ccdf ~ e^(-beta n)``."""
    n = np.array([r.n for r in rows], float)
    c = np.array([r.ccdf for r in rows], float)
    return float(-np.polyfit(n, np.log(c), 1)[0])


def tail_csv(rows):
    return TAIL_HEADER + "\n" + "".join(r.csv() + "\n" for r in rows)
