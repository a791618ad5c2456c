"""Graphical construction, the discrete-time chain, and trajectory batches.

Each site carries a rate-one Poisson clock; ring ``c`` of site ``x`` is
drawn from the counter-based stream of ``x``'s global label (uniform
``2c`` gives the exponential gap, uniform ``2c+1`` the Bernoulli(p)
coin).  Rings are processed in global ``(time, site)`` order; at a legal
ring the spin is reset to the coin.  The fused batch kernels regenerate
exactly the stream that :func:`generate_events` materialises, so
``simulate(model, eta0, generate_events(...))`` and a batch run agree bit
for bit.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import rng
from .errors import InvalidHorizon, ShapeError
from .model import SEGMENT, TREE, Model, build_ad_tree, build_east_chain, BoundaryCondition, Topology
from .rng import Seed, stream_key, uniform

DEFAULT_SPEED = 4.0
CHUNK = 2048

# -- numba kernels -----------------------------------------------------------


@nb.njit(cache=True, inline="always")
def _legal(state, nbr, table, x):
    code = 0
    for j in range(nbr.shape[1]):
        code |= np.int64(state[nbr[x, j]]) << j
    return table[code] == 1


@nb.njit(cache=True, inline="always")
def _before(next_t, a, b):
    ta = next_t[a]
    tb = next_t[b]
    return ta < tb or (ta == tb and a < b)


@nb.njit(cache=True)
def _sift_down(heap, next_t, pos, size):
    item = heap[pos]
    while True:
        c = 2 * pos + 1
        if c >= size:
            break
        if c + 1 < size and _before(next_t, heap[c + 1], heap[c]):
            c += 1
        if _before(next_t, heap[c], item):
            heap[pos] = heap[c]
            pos = c
        else:
            break
    heap[pos] = item


@nb.njit(cache=True)
def _heapify(heap, next_t, size):
    for pos in range(size // 2 - 1, -1, -1):
        _sift_down(heap, next_t, pos, size)


@nb.njit(cache=True)
def _start_clocks(keys, next_t, counter, heap):
    n = keys.shape[0]
    for x in range(n):
        counter[x] = 0
        next_t[x] = -math.log(uniform(keys[x], 0))
        heap[x] = x
    _heapify(heap, next_t, n)


@nb.njit(cache=True)
def _ring(state, nbr, table, keys, p, next_t, counter, x):
    """Apply the ring at the heap top ``x`` and draw its next ring time; returns legality."""
    c = counter[x]
    legal = _legal(state, nbr, table, x)
    if legal:
        state[x] = 1 if uniform(keys[x], 2 * c + 1) < p else 0
    counter[x] = c + 1
    next_t[x] = next_t[x] - math.log(uniform(keys[x], 2 * c + 2))
    return legal


@nb.njit(cache=True)
def _evolve_grid(state, nbr, table, keys, p, t_grid, snaps):
    """Run the construction, writing ``state`` into ``snaps[g]`` at each grid time."""
    n = nbr.shape[0]
    next_t = np.empty(n)
    counter = np.empty(n, dtype=np.int64)
    heap = np.empty(n, dtype=np.int64)
    _start_clocks(keys, next_t, counter, heap)
    g = 0
    ng = t_grid.shape[0]
    while g < ng:
        x = heap[0]
        t = next_t[x]
        while g < ng and t_grid[g] < t:
            snaps[g, :] = state
            g += 1
        if g >= ng:
            break
        _ring(state, nbr, table, keys, p, next_t, counter, x)
        _sift_down(heap, next_t, 0, n)


@nb.njit(cache=True)
def _gen_events(keys, p, horizon, cap):
    n = keys.shape[0]
    sites = np.empty(cap, dtype=np.int64)
    times = np.empty(cap)
    coins = np.empty(cap, dtype=np.uint8)
    m = 0
    for x in range(n):
        t = 0.0
        c = 0
        while True:
            t = t - math.log(uniform(keys[x], 2 * c))
            if t > horizon:
                break
            if m == cap:
                return sites, times, coins, -1
            sites[m] = x
            times[m] = t
            coins[m] = 1 if uniform(keys[x], 2 * c + 1) < p else 0
            m += 1
            c += 1
    return sites, times, coins, m


@nb.njit(cache=True)
def _apply_events(state, nbr, table, sites, coins):
    for i in range(sites.shape[0]):
        x = sites[i]
        if _legal(state, nbr, table, x):
            state[x] = coins[i]


@nb.njit(cache=True)
def _sample_state(state, seed, stream, labels, probs):
    for y in range(labels.shape[0]):
        key = stream_key(seed, stream, rng.INIT, labels[y])
        state[y] = 1 if uniform(key, 0) < probs[y] else 0


@nb.njit(cache=True)
def _ring_keys(keys, seed, stream, labels):
    for x in range(keys.shape[0]):
        keys[x] = stream_key(seed, stream, rng.RING, labels[x])


@nb.njit(cache=True, nogil=True)
def _batch_grid(nbr, table, labels, probs, p, t_grid, seed, init_streams, ring_streams, out):
    n = nbr.shape[0]
    n_ext = labels.shape[0]
    state = np.empty(n_ext, dtype=np.uint8)
    keys = np.empty(n, dtype=np.uint64)
    for i in range(init_streams.shape[0]):
        _sample_state(state, seed, init_streams[i], labels, probs)
        _ring_keys(keys, seed, ring_streams[i], labels)
        _evolve_grid(state, nbr, table, keys, p, t_grid, out[i])


@nb.njit(cache=True)
def _discrete(state, nbr, table, p, steps, key):
    n = nbr.shape[0]
    for k in range(steps):
        x = min(np.int64(uniform(key, 2 * k) * n), n - 1)
        if _legal(state, nbr, table, x):
            state[x] = 1 if uniform(key, 2 * k + 1) < p else 0


# -- data types ----------------------------------------------------------------


@dataclass(frozen=True)
class EventLog:
    """Poisson rings merged in ``(time, site)`` order, each with its coin."""

    n_sites: int
    horizon: float
    sites: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)
    coins: np.ndarray = field(repr=False)

    def __len__(self):
        return int(self.sites.shape[0])

    def for_site(self, x):
        mask = self.sites == x
        return self.times[mask], self.coins[mask]

    def check(self):
        for x in range(self.n_sites):
            t, _ = self.for_site(x)
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"ring times of site {x} not strictly increasing")
        if len(self) and (self.times.max() > self.horizon or self.times.min() < 0):
            raise ValueError("ring time outside [0, horizon]")
        order = np.lexsort((self.sites, self.times))
        if not np.array_equal(order, np.arange(len(self))):
            raise ValueError("events not in global time order")

    def to_text(self):
        lines = [f"# n_sites={self.n_sites} horizon={self.horizon!r}"]
        lines += [f"{s} {t!r} {c}" for s, t, c in zip(self.sites.tolist(), self.times.tolist(), self.coins.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rows = text.strip().splitlines()
        head = dict(kv.split("=") for kv in rows[0].lstrip("# ").split())
        body = [r.split() for r in rows[1:]]
        return cls(
            int(head["n_sites"]),
            float(head["horizon"]),
            np.array([int(r[0]) for r in body], dtype=np.int64),
            np.array([float(r[1]) for r in body]),
            np.array([int(r[2]) for r in body], dtype=np.uint8),
        )

    @classmethod
    def from_rings(cls, n_sites, horizon, rings):
        """Build a log from explicit ``(site, time, coin)`` triples (tests, debugging)."""
        rings = sorted(rings, key=lambda r: (r[1], r[0]))
        return cls(
            n_sites,
            float(horizon),
            np.array([r[0] for r in rings], dtype=np.int64),
            np.array([r[1] for r in rings], dtype=float),
            np.array([r[2] for r in rings], dtype=np.uint8),
        )


@dataclass(frozen=True)
class InitialMeasureSpec:
    """Delta at a fixed configuration, product Bernoulli(p'), or the equilibrium product measure."""

    kind: str = "equilibrium"
    p_prime: float | None = None
    config: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("delta", "bernoulli", "equilibrium"):
            raise ValueError(f"unknown initial measure {self.kind!r}")
        if self.kind == "bernoulli" and not (self.p_prime is not None and 0.0 <= self.p_prime <= 1.0):
            raise ValueError("Bernoulli initial measure needs 0 <= p' <= 1")
        if self.kind == "delta" and self.config is None:
            raise ValueError("delta initial measure needs a configuration")

    @classmethod
    def delta(cls, config):
        return cls("delta", config=tuple(int(v) for v in config))

    @classmethod
    def bernoulli(cls, p_prime):
        return cls("bernoulli", p_prime=float(p_prime))

    @classmethod
    def equilibrium(cls):
        return cls("equilibrium")

    def probabilities(self, n, p=None):
        if self.kind == "delta":
            if len(self.config) != n:
                raise ShapeError(f"delta configuration has {len(self.config)} sites, volume has {n}")
            return np.asarray(self.config, dtype=float)
        if self.kind == "bernoulli":
            return np.full(n, self.p_prime)
        if p is None:
            raise ValueError("equilibrium measure needs the model density")
        return np.full(n, float(p))


@dataclass(frozen=True)
class Observable:
    """Local function given by a value table over the packed spins of ``support``.

    Bit ``j`` of the table index is the spin at ``support[j]``.  A
    non-tabulated observable supplies ``func`` acting on a batch of
    ``(..., n_ext)`` configurations instead.
    """

    support: tuple[int, ...]
    table: tuple[float, ...] | None = None
    func: Callable | None = field(default=None, compare=False)
    name: str = "f"

    def __post_init__(self):
        if (self.table is None) == (self.func is None):
            raise ValueError("give exactly one of table or func")
        if self.table is not None and len(self.table) != 2 ** len(self.support):
            raise ValueError("table size must be 2**len(support)")

    @classmethod
    def spin(cls, x):
        return cls((x,), (0.0, 1.0), name=f"eta({x})")

    @classmethod
    def vacancy(cls, x):
        return cls((x,), (1.0, 0.0), name=f"1-eta({x})")

    @classmethod
    def constant(cls, c=1.0):
        return cls((), (float(c),), name=f"const({c})")

    @classmethod
    def tabulate(cls, support, fn, name="f"):
        k = len(support)
        table = tuple(float(fn(tuple((c >> j) & 1 for j in range(k)))) for c in range(2**k))
        return cls(tuple(support), table, name=name)

    def __call__(self, configs):
        arr = np.asarray(configs)
        if self.func is not None:
            return np.asarray(self.func(arr), dtype=float)
        code = np.zeros(arr.shape[:-1], dtype=np.int64)
        for j, x in enumerate(self.support):
            code |= arr[..., x].astype(np.int64) << j
        return np.asarray(self.table, dtype=float)[code]

    def _weights(self, p):
        k = len(self.support)
        codes = np.arange(2**k)
        ones = np.array([bin(c).count("1") for c in codes])
        return p**ones * (1 - p) ** (k - ones)

    def mean(self, p):
        """Exact mean under the Bernoulli(p) product measure."""
        if self.table is None:
            raise ValueError("exact moments need a tabulated observable")
        return float(np.dot(self._weights(p), self.table))

    def variance(self, p):
        t = np.asarray(self.table)
        w = self._weights(p)
        return float(np.dot(w, t**2) - np.dot(w, t) ** 2)

    @property
    def span(self):
        """Number of sites of the smallest interval containing the support."""
        if not self.support:
            return 0
        return max(self.support) - min(self.support) + 1

    def check_support(self, n):
        if any(not 0 <= x < n for x in self.support):
            raise ShapeError(f"observable support {self.support} outside volume of size {n}")


@dataclass(frozen=True)
class Window:
    """Truncated volume: segment ``[lo, hi]`` or tree down to ``depth``."""

    kind: str
    lo: int = 0
    hi: int = 0
    depth: int = 0

    @property
    def length(self):
        return self.hi - self.lo + 1

    def model(self, p, bc=None):
        if self.kind == SEGMENT:
            return build_east_chain(self.length, bc, p, origin=self.lo)
        return build_ad_tree(self.depth, bc, p)

    def index(self, x):
        """Vertex id inside the window of absolute position ``x``."""
        return x - self.lo if self.kind == SEGMENT else x


# -- operations ------------------------------------------------------------------


def _model_arrays(model):
    return model.neighbours, model.table, model.labels


def generate_events(model, T, seed=Seed()):
    """Independent rate-1 Poisson rings on ``[0, T]`` at every volume site, with Bernoulli(p) coins."""
    if T < 0:
        raise InvalidHorizon(f"horizon must be >= 0, got {T}")
    labels = model.labels[: model.n]
    keys = np.empty(model.n, dtype=np.uint64)
    _ring_keys(keys, rng.as_word(seed.seed), rng.as_word(seed.stream), labels)
    cap = int(model.n * (T + 10 * math.sqrt(T + 1) + 10))
    while True:
        sites, times, coins, m = _gen_events(keys, model.p, float(T), cap)
        if m >= 0:
            break
        cap *= 2
    order = np.lexsort((sites[:m], times[:m]))
    return EventLog(model.n, float(T), sites[:m][order], times[:m][order], coins[:m][order])


def simulate(model, eta0, events):
    """Final configuration after processing every ring of ``events`` from ``eta0``."""
    eta0 = np.asarray(eta0, dtype=np.uint8)
    if eta0.shape != (model.n,) or events.n_sites != model.n:
        raise ShapeError(f"volume {model.n}, initial config {eta0.shape}, log for {events.n_sites} sites")
    state = model.extend(eta0)
    _apply_events(state, model.neighbours, model.table, events.sites, events.coins)
    return state[: model.n].copy()


def simulate_discrete(model, eta0, steps, seed=Seed()):
    """Discrete chain: each step picks a uniform site and, if legal, resamples it from Bernoulli(p)."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    state = model.extend(eta0)
    key = np.uint64(stream_key(rng.as_word(seed.seed), rng.as_word(seed.stream), rng.DISCRETE, 0))
    _discrete(state, model.neighbours, model.table, model.p, int(steps), key)
    return state[: model.n].copy()


def sample_initial(spec, volume, seed=Seed(), p=None):
    """Draw a configuration from ``spec`` on ``volume`` (a Model or a site count)."""
    if isinstance(volume, Model):
        labels, n, p = volume.labels[: volume.n], volume.n, volume.p if p is None else p
    else:
        n = int(volume)
        labels = np.arange(n, dtype=np.int64)
    probs = spec.probabilities(n, p)
    state = np.empty(n, dtype=np.uint8)
    _sample_state(state, rng.as_word(seed.seed), rng.as_word(seed.stream), labels, probs)
    return state


def truncation_window(family, support, t, M=DEFAULT_SPEED):
    """Volume on which a local observable at time ``t`` is computed.

    East reads only to the right, so segments grow by ``ceil(M t)`` on the
    right only; trees grow ``ceil(M t)`` levels below the deepest support
    vertex.
    """
    support = list(support)
    if not support:
        raise ValueError("support must be nonempty")
    if M <= 0 or t < 0:
        raise ValueError("need M > 0 and t >= 0")
    extra = math.ceil(M * t)
    if family in ("east", SEGMENT):
        return Window(SEGMENT, lo=min(support), hi=max(support) + extra)
    if family in ("ad", TREE):
        deepest = max(Topology.level(x) for x in support)
        return Window(TREE, depth=deepest + extra)
    raise ValueError(f"unknown model family {family!r}")


def run_chunks(fn, n, threads=1, chunk=CHUNK):
    """Call ``fn(start, stop)`` over fixed-size chunks of ``range(n)``.

    Chunk boundaries do not depend on ``threads``, and each call writes
    into its own slice of preallocated output, so results are identical
    for every thread count.
    """
    bounds = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    if threads <= 1 or len(bounds) == 1:
        for a, b in bounds:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda ab: fn(*ab), bounds))


def simulate_batch(model, probs, t_grid, seed, n_traj, init_streams=None, ring_streams=None, threads=1):
    """Snapshots ``(n_traj, len(t_grid), n_ext)`` of independent trajectories.

    ``probs`` gives, per extended vertex, the probability of an initial 1
    (frozen vertices included, so random boundaries are possible).
    Trajectory ``i`` uses stream ``seed.spawn(i)`` unless explicit stream
    arrays are passed.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0) or np.any(np.diff(t_grid) < 0):
        raise InvalidHorizon("time grid must be nonnegative and nondecreasing")
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (model.n_ext,):
        raise ShapeError(f"initial probabilities need {model.n_ext} entries")
    if init_streams is None:
        init_streams = seed.spawn_streams(n_traj)
    if ring_streams is None:
        ring_streams = init_streams
    out = np.empty((n_traj, t_grid.shape[0], model.n_ext), dtype=np.uint8)
    nbr, table, labels = _model_arrays(model)
    s = rng.as_word(seed.seed)

    def work(a, b):
        _batch_grid(nbr, table, labels, probs, model.p, t_grid, s, init_streams[a:b], ring_streams[a:b], out[a:b])

    run_chunks(work, n_traj, threads)
    return out


def initial_probabilities(model, spec):
    """Per-extended-vertex initial probabilities: ``spec`` on the volume, frozen spins fixed."""
    return np.concatenate([spec.probabilities(model.n, model.p), model.frozen.astype(float)])


def estimate_expectation(model, spec, f, t, n_samples, seed=Seed(), threads=1):
    """I.i.d. trajectory average of ``f(eta_t)`` with its standard error."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    f.check_support(model.n)
    snaps = simulate_batch(model, initial_probabilities(model, spec), [t], seed, n_samples, threads=threads)
    values = f(snaps[:, 0, :])
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(n_samples))


def estimate_series(model, spec, f, t_grid, n_samples, seed=Seed(), threads=1):
    """``(t, mean, stderr, n)`` rows of ``f(eta_t)`` along one set of trajectories."""
    f.check_support(model.n)
    snaps = simulate_batch(model, initial_probabilities(model, spec), t_grid, seed, n_samples, threads=threads)
    values = f(snaps)
    means = values.mean(axis=0)
    errs = values.std(axis=0, ddof=1) / math.sqrt(n_samples)
    return [(float(t), float(m), float(e), n_samples) for t, m, e in zip(t_grid, means, errs)]


def series_csv(rows):
    return "t,mean,stderr,n\n" + "".join(f"{t:.6g},{m:.10g},{e:.10g},{n}\n" for t, m, e, n in rows)
