"""Quench experiments: relaxation from a non-equilibrium product law and its failure above p_c."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la

from .engine import (
    DEFAULT_SPEED,
    InitialMeasureSpec,
    Observable,
    initial_probabilities,
    simulate_batch,
)
from .errors import DimensionGuard, FitFailure
from .model import BoundaryCondition, build_ad_tree, build_east_chain
from .distinguished import variance_contraction
from .percolation import cluster_stats, cluster_tail, theta_limit
from .rng import Seed
from .spectral import MAX_SITES, build_generator, spectral_gap_exact
from .stats import ExpFit, fit_exponential_rate

__all__ = [
    "ConvergenceBound",
    "ExperimentConfig",
    "QuenchResult",
    "exact_quench_series",
    "fit_exponential_rate",
    "run_nonconvergence_ad",
    "run_quench_ad",
    "run_quench_east",
]

AD_EXACT_DEPTH = 3  # deepest AD tree whose generator fits the enumeration guard
SNAPSHOT_BYTES = 2**25  # memory budget for one block of snapshots


@dataclass(frozen=True)
class ExperimentConfig:
    family: str = "east"  # "east" or "ad"
    size: int = 10  # segment length, or tree depth
    p: float = 0.3
    initial: InitialMeasureSpec = field(default_factory=lambda: InitialMeasureSpec.bernoulli(0.6))
    observable: Observable = field(default_factory=lambda: Observable.vacancy(0))
    t_grid: tuple = tuple(float(t) for t in range(0, 13))
    n_out: int = 2000
    n_in: int = 64
    seed: Seed = Seed()
    M: float = DEFAULT_SPEED
    threads: int = 1
    out: str | None = None

    def __post_init__(self):
        if self.family not in ("east", "ad"):
            raise ValueError(f"unknown family {self.family!r}")
        grid = np.asarray(self.t_grid, dtype=float)
        if grid.size == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
            raise ValueError("time grid must be nonnegative and strictly increasing")
        if self.n_out * self.n_in < 100:
            raise ValueError("need at least 100 trajectories")
        if self.n_in < 2:
            raise ValueError("need at least two inner samples for the bias correction")

    def model(self, bc=None):
        if self.family == "east":
            return build_east_chain(self.size, bc, self.p)
        return build_ad_tree(self.size, bc, self.p)

    def to_dict(self):
        init = self.initial
        return {
            "family": self.family, "size": self.size, "p": self.p,
            "initial": init.kind, "p_prime": init.p_prime,
            "config": "".join(map(str, init.config)) if init.config else None,
            "support": list(self.observable.support), "table": list(self.observable.table or ()),
            "t_grid": list(self.t_grid), "n_out": self.n_out, "n_in": self.n_in,
            "seed": self.seed.seed, "stream": self.seed.stream, "M": self.M,
        }


@dataclass(frozen=True)
class ConvergenceBound:
    m: float | None  # fitted rate
    C: float | None  # fitted prefactor
    C_f: float  # (1/(p ^ q))^span * sqrt(Var_mu f)
    reference_rate: float  # gap / 2
    gap: float
    gap_volume: str  # which volume the gap was computed on
    residual: float | None = None
    lam: float | None = None  # density-ratio exponent of the initial law, when known

    def envelope(self, t):
        return self.C_f * np.exp(-self.reference_rate * np.asarray(t, dtype=float))


@dataclass
class QuenchResult:
    t: np.ndarray
    value: np.ndarray  # bias-corrected estimate of int dnu |E f(eta_t) - mu(f)|
    stderr: np.ndarray
    raw: np.ndarray  # uncorrected two-level estimate
    n_out: int
    n_in: int
    bound: ConvergenceBound
    mu_f: float
    notes: dict = field(default_factory=dict)

    def rows(self):
        return [(float(t), float(v), float(s), self.n_out, self.n_in) for t, v, s in zip(self.t, self.value, self.stderr)]

    def to_csv(self):
        lines = ["t,value,stderr,n_out,n_in"]
        lines += [f"{t:.6g},{v:.10g},{s:.10g},{a},{b}" for t, v, s, a, b in self.rows()]
        return "\n".join(lines) + "\n"

    def dominated(self, t_min=0.0):
        """Pointwise ``value <= C_f e^{-(gap/2) t} + 3 stderr`` for ``t >= t_min``."""
        env = self.bound.envelope(self.t)
        ok = self.value <= env + 3 * self.stderr
        return bool(np.all(ok[self.t >= t_min])), ok

    def summary(self):
        b = self.bound
        dom, _ = self.dominated(self.notes.get("t0", 0.0))
        return {
            "m": b.m, "C": b.C, "C_f": b.C_f, "gap": b.gap, "reference_rate": b.reference_rate,
            "gap_volume": b.gap_volume, "fit_residual": b.residual, "mu_f": self.mu_f,
            "criteria": {"fitted_m_positive": b.m is not None and b.m > 0, "dominated": dom},
            **self.notes,
        }


def constant_prefactor(f, p):
    """``C_f = (1/(p ^ q))^span(f) Var_mu(f)^{1/2}``."""
    return (1.0 / min(p, 1.0 - p)) ** f.span * math.sqrt(f.variance(p))


def _two_level(model, probs, f, t_grid, n_out, n_in, seed, threads):
    """Per outer configuration: inner mean and leave-one-out means of ``f(eta_t)``."""
    mu_f = f.mean(model.p)
    grid = np.asarray(t_grid, dtype=float)
    raw = np.empty((n_out, grid.size))
    jack = np.empty((n_out, grid.size))
    outer = seed.spawn_streams(n_out)
    block = max(1, SNAPSHOT_BYTES // (n_in * grid.size * model.n_ext))
    for a in range(0, n_out, block):
        b = min(a + block, n_out)
        k = b - a
        init = np.repeat(outer[a:b], n_in)
        ring = np.concatenate([Seed(seed.seed, int(s)).spawn_streams(n_in) for s in outer[a:b]])
        snaps = simulate_batch(model, probs, grid, seed, k * n_in, init, ring, threads)
        vals = f(snaps).reshape(k, n_in, grid.size)
        mean = vals.mean(axis=1)
        loo = (n_in * mean[:, None, :] - vals) / (n_in - 1)
        g = np.abs(mean - mu_f)
        g_loo = np.abs(loo - mu_f).mean(axis=1)
        raw[a:b] = g
        jack[a:b] = n_in * g - (n_in - 1) * g_loo
    return mu_f, raw, jack


def _reference_gap(model, family):
    if family == "east":
        return spectral_gap_exact(build_generator(model)).gap, f"segment of {model.n} sites"
    if model.n <= MAX_SITES:
        return spectral_gap_exact(build_generator(model)).gap, f"tree of depth {model.topology.depth}"
    depth = AD_EXACT_DEPTH
    small = build_ad_tree(depth, None, model.p)
    return spectral_gap_exact(build_generator(small)).gap, f"tree of depth {depth} (window too large)"


def _run_quench(cfg, model, probs, notes):
    f = cfg.observable
    f.check_support(model.n)
    mu_f, raw, jack = _two_level(model, probs, f, cfg.t_grid, cfg.n_out, cfg.n_in, cfg.seed, cfg.threads)
    value = jack.mean(axis=0)
    stderr = jack.std(axis=0, ddof=1) / math.sqrt(cfg.n_out)
    gap, where = _reference_gap(model, cfg.family)
    t = np.asarray(cfg.t_grid, dtype=float)
    try:
        fit = fit_exponential_rate(list(zip(t, value, stderr)))
    except FitFailure as exc:
        fit = None
        notes = {**notes, "fit_error": str(exc)}
    bound = ConvergenceBound(
        m=fit.rate if fit else None, C=fit.prefactor if fit else None, C_f=constant_prefactor(f, cfg.p),
        reference_rate=gap / 2, gap=gap, gap_volume=where, residual=fit.residual if fit else None,
        lam=notes.get("lambda"),
    )
    return QuenchResult(t, value, stderr, raw.mean(axis=0), cfg.n_out, cfg.n_in, bound, mu_f, notes)


def _product_lambda(spec, p):
    """Sup over sites of ``log max(p'/p, q'/q)`` for a product quench."""
    if spec.kind != "bernoulli":
        return None
    pp = spec.p_prime
    vals = [pp / p if pp > 0 else 0.0, (1 - pp) / (1 - p) if pp < 1 else 0.0]
    return math.log(max(vals))


def run_quench_east(cfg):
    """``int dnu |E f(eta_t) - mu(f)|`` on the segment window ``[0, size)`` with a zero at ``size``."""
    if cfg.family != "east":
        raise ValueError("run_quench_east needs an East config")
    model = cfg.model()
    probs = initial_probabilities(model, cfg.initial)
    notes = {"lambda": _product_lambda(cfg.initial, cfg.p)}
    if cfg.initial.kind == "delta":
        config = np.asarray(cfg.initial.config)
        right = max(cfg.observable.support)
        zeros = [x for x in range(right, model.n) if config[x] == 0]
        x0 = zeros[0] if zeros else model.n
        gap, _ = _reference_gap(model, "east")
        notes["x0"] = x0
        notes["t0"] = 2 * (x0 - right) * abs(math.log(min(cfg.p, 1 - cfg.p))) / gap
    return _run_quench(cfg, model, probs, notes)


def run_quench_ad(cfg, initial_config=None):
    """AD analogue on a tree window with an empty frozen layer.

    With ``initial_config`` the run starts from that fixed configuration,
    which must have no occupied cluster touching the bottom level.
    """
    if cfg.family != "ad":
        raise ValueError("run_quench_ad needs an AD config")
    model = cfg.model()
    notes = {"lambda": _product_lambda(cfg.initial, cfg.p)}
    if initial_config is not None:
        config = np.asarray(initial_config, dtype=np.uint8)
        touching = [x for x in range(model.n) if cluster_stats(config, x, model.topology).reached_bottom]
        if touching:
            raise ValueError(f"initial clusters of {touching[:5]} reach the bottom of the window")
        support_cluster = set()
        for x in cfg.observable.support:
            support_cluster |= cluster_stats(config, x, model.topology).vertices
        gap, _ = _reference_gap(model, "ad")
        size = len(support_cluster | set(cfg.observable.support))
        notes["cluster_size"] = size
        notes["t0"] = -2 * size * math.log(min(cfg.p, 1 - cfg.p)) / gap
        cfg = replace(cfg, initial=InitialMeasureSpec.delta(config))
    probs = initial_probabilities(model, cfg.initial)
    return _run_quench(cfg, model, probs, notes)


def exact_quench_series(model, spec, f, t_grid):
    """Exact ``int dnu |E_eta f(eta_t) - mu(f)|`` by spectral decomposition (product or delta ``nu``)."""
    if model.n > 12:
        raise DimensionGuard("exact quench series limited to 12 sites")
    gen = build_generator(model)
    w = gen.weights
    n = model.n
    states = np.arange(gen.dim)
    cfg = ((states[:, None] >> np.arange(n)) & 1).astype(np.uint8)
    ext = np.concatenate([cfg, np.tile(model.frozen, (gen.dim, 1))], axis=1)
    fv = f(ext)
    mu_f = float(np.dot(w, fv))
    s = np.sqrt(w)
    S = -gen.symmetrized().toarray()
    evals, evecs = la.eigh((S + S.T) / 2)
    coef = evecs.T @ (s * fv)
    probs = spec.probabilities(n, model.p)
    ones = cfg.astype(float)
    nu = np.prod(np.where(ones == 1, probs, 1 - probs), axis=1)
    out = []
    for t in np.atleast_1d(t_grid):
        ptf = (evecs @ (np.exp(-evals * t) * coef)) / s
        out.append(float(np.dot(nu, np.abs(ptf - mu_f))))
    return np.array(out)


# -- above p_c ------------------------------------------------------------------


@dataclass
class NonconvergenceReport:
    mode: str
    t: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    mu_f: float
    theta: float | None = None
    threshold: float | None = None
    rates: dict | None = None

    def to_csv(self, n_out, n_in):
        lines = ["t,value,stderr,n_out,n_in"]
        lines += [f"{t:.6g},{v:.10g},{s:.10g},{n_out},{n_in}" for t, v, s in zip(self.t, self.value, self.stderr)]
        return "\n".join(lines) + "\n"

    def summary(self):
        out = {"mode": self.mode, "mu_f": self.mu_f}
        if self.mode == "persistence":
            out.update(theta=self.theta, threshold=self.threshold,
                       min_value=float(np.min(self.value)),
                       criteria={"persistent": bool(np.all(self.value >= self.threshold)),
                                 "mu_f_small": self.mu_f <= 0.02})
        else:
            out.update(rates=self.rates,
                       criteria={"slowing_down": bool(self.rates and self.rates.get("ratio", 0) >= 1.5)})
        return out


def large_cluster_indicator(ell, depth):
    """``f = 1{|C_root| >= ell}`` on a depth-``depth`` window; a frozen 1 below the leaves counts as infinite."""
    n = 2 ** (depth + 1) - 1

    def func(configs):
        arr = np.asarray(configs)
        flat = arr.reshape(-1, arr.shape[-1])
        m = flat.shape[0]
        size = np.zeros(m, dtype=np.int64)
        infinite = np.zeros(m, dtype=bool)
        reach = flat[:, :1].astype(bool)
        size += reach[:, 0]
        lo = 0
        while True:
            lo = 2 * lo + 1
            hi = min(2 * lo + 1, flat.shape[1])
            if lo >= flat.shape[1]:
                break
            child = np.repeat(reach, 2, axis=1)[:, : hi - lo] & flat[:, lo:hi].astype(bool)
            if lo >= n:
                infinite |= child.any(axis=1)
            else:
                size += child.sum(axis=1)
            reach = child
        return ((size >= ell) | infinite).astype(float).reshape(arr.shape[:-1])

    return Observable(tuple(range(n)), func=func, name=f"1{{|C_0|>={ell}}}")


def run_nonconvergence_ad(p, p_prime, t_grid, n_samples, seed=Seed(), depth=6, ell=16, eps=0.03,
                          n_in=16, threads=1, f=None):
    """Quench of the AD model from Bernoulli(p') on a tree window.

    ``p' > 1/2``: persistence of ``nu_t(1{|C_0| >= ell})``.  The frozen layer
    below the leaves carries the infinite clusters of ``nu``: each frozen
    vertex is occupied-and-percolating with probability ``theta(p')`` and
    never moves, otherwise it is an empty boundary site.

    ``p' = 1/2``: decay of ``int dnu |E f(eta_t) - mu(f)|`` for ``f =
    1 - eta(root)`` and a comparison of the fitted rates on an early and a
    late time window.
    """
    if p_prime > 0.5:
        model = build_ad_tree(depth, None, p)
        theta = theta_limit(p_prime)
        probs = np.concatenate([np.full(model.n, p_prime), np.full(model.n_ext - model.n, theta)])
        obs = large_cluster_indicator(ell, depth)
        snaps_val = np.empty((n_samples, len(t_grid)))
        streams = seed.spawn_streams(n_samples)
        block = max(1, SNAPSHOT_BYTES // (len(t_grid) * model.n_ext))
        for a in range(0, n_samples, block):
            b = min(a + block, n_samples)
            snaps = simulate_batch(model, probs, t_grid, seed, b - a, streams[a:b], streams[a:b], threads)
            snaps_val[a:b] = obs(snaps)
        value = snaps_val.mean(axis=0)
        stderr = snaps_val.std(axis=0, ddof=1) / math.sqrt(n_samples)
        mu_f = cluster_tail(p, [ell])[0].ccdf
        return NonconvergenceReport("persistence", np.asarray(t_grid, float), value, stderr, mu_f, theta,
                                    theta - eps)
    f = Observable.vacancy(0) if f is None else f
    cfg = ExperimentConfig("ad", depth, p, InitialMeasureSpec.bernoulli(p_prime), f, tuple(t_grid),
                           n_out=max(n_samples // n_in, 2), n_in=n_in, seed=seed, threads=threads)
    model = cfg.model()
    mu_f, raw, jack = _two_level(model, initial_probabilities(model, cfg.initial), f, cfg.t_grid, cfg.n_out,
                                 cfg.n_in, seed, threads)
    t = np.asarray(t_grid, float)
    value = jack.mean(axis=0)
    stderr = jack.std(axis=0, ddof=1) / math.sqrt(cfg.n_out)
    rates = {}
    for name, (lo, hi) in {"early": (5, 15), "late": (20, 40)}.items():
        sel = (t >= lo) & (t <= hi)
        try:
            rates[name] = fit_exponential_rate(list(zip(t[sel], value[sel], stderr[sel])), tail=False).rate
        except FitFailure:
            rates[name] = None
    if rates.get("early") and rates.get("late"):
        rates["ratio"] = rates["early"] / rates["late"]
    return NonconvergenceReport("slowing", t, value, stderr, mu_f, rates=rates)


def path_mean_zero(length, p, t, f, n_paths, n_inner, seed=Seed()):
    """``int dmu E(f(eta_t) | path) - mu(f)`` per path, with standard errors."""
    rows = variance_contraction(length, p, t, f, n_paths, n_inner, seed)
    mu_f = f.mean(p)
    return [(r["mean"] - mu_f, r["mean_stderr"]) for r in rows]
