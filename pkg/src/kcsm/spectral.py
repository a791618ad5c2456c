"""Exact finite-volume generators and spectral gaps.

Configurations are enumerated as integers with bit ``x`` holding the spin
at site ``x``.  The off-diagonal rate ``omega -> omega^x`` is
``c_x(omega) * (p if omega(x) == 0 else q)`` and the product Bernoulli(p)
measure is reversible, so ``D^{1/2} Q D^{-1/2}`` is symmetric with
entries ``sqrt(p q) c_x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as sla

from .engine import InitialMeasureSpec, Observable, simulate_batch, initial_probabilities
from .errors import DimensionGuard, FitFailure, NumericalFailure
from .model import BoundaryCondition, build_east_chain
from .rng import Seed
from .stats import fit_exponential_rate

MAX_SITES = 24
DENSE_MAX_DIM = 2**11
KERNEL_TOL = 1e-10


@dataclass(frozen=True)
class Generator:
    model: object
    rates: sp.csr_matrix  # full generator Q, rows sum to zero
    weights: np.ndarray  # product measure of every configuration

    @property
    def dim(self):
        return self.rates.shape[0]

    def symmetrized(self):
        """``D^{1/2} Q D^{-1/2}`` as a sparse matrix."""
        s = np.sqrt(self.weights)
        return sp.diags(s) @ self.rates @ sp.diags(1.0 / s)

    def row_sums(self):
        return np.asarray(self.rates.sum(axis=1)).ravel()

    def detailed_balance_residual(self):
        """Largest relative mismatch of ``mu(w) Q(w, w') - mu(w') Q(w', w)``."""
        flux = sp.diags(self.weights) @ self.rates
        diff = abs(flux - flux.T)
        scale = abs(flux).max()
        return float(diff.max() / scale) if scale > 0 else 0.0


@dataclass(frozen=True)
class SpectrumResult:
    gap: float
    kernel_dim: int
    ergodic: bool
    spectrum: np.ndarray | None = None
    reachable_gap: float | None = None  # gap on the class of the all-ones configuration


def _site_data(model):
    n = model.n
    if n > MAX_SITES:
        raise DimensionGuard(f"{n} sites exceeds the exact-enumeration guard of {MAX_SITES}")
    states = np.arange(2**n, dtype=np.int64)
    ext_bits = []
    for y in range(model.n_ext):
        if y < n:
            ext_bits.append((states >> y) & 1)
        else:
            ext_bits.append(np.full(states.shape, int(model.frozen[y - n]), dtype=np.int64))
    legal = []
    for x in range(n):
        code = np.zeros_like(states)
        for j, y in enumerate(model.neighbours[x]):
            code |= ext_bits[y] << j
        legal.append(model.table[code].astype(bool))
    return states, legal


def product_weights(n, p):
    states = np.arange(2**n, dtype=np.int64)
    ones = np.zeros_like(states)
    for x in range(n):
        ones += (states >> x) & 1
    return p ** ones.astype(float) * (1.0 - p) ** (n - ones).astype(float)


def build_generator(model):
    """Sparse rate matrix of the constrained dynamics on ``{0,1}^V``."""
    n, p, q = model.n, model.p, model.q
    states, legal = _site_data(model)
    rows, cols, vals = [], [], []
    diag = np.zeros(states.shape[0])
    for x in range(n):
        src = states[legal[x]]
        occupied = (src >> x) & 1
        rate = np.where(occupied == 1, q, p)
        rows.append(src)
        cols.append(src ^ (1 << x))
        vals.append(rate)
        np.subtract.at(diag, src, rate)
    rows.append(states)
    cols.append(states)
    vals.append(diag)
    Q = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(states.shape[0],) * 2,
    )
    return Generator(model, Q, product_weights(n, p))


def build_discrete_kernel(model):
    """Discrete chain: uniform site, then constrained heat-bath resampling."""
    n, p, q = model.n, model.p, model.q
    states, legal = _site_data(model)
    rows, cols, vals = [], [], []
    stay = np.ones(states.shape[0])
    for x in range(n):
        src = states[legal[x]]
        occupied = (src >> x) & 1
        prob = np.where(occupied == 1, q, p) / n
        rows.append(src)
        cols.append(src ^ (1 << x))
        vals.append(prob)
        np.subtract.at(stay, src, prob)
    rows.append(states)
    cols.append(states)
    vals.append(stay)
    P = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(states.shape[0],) * 2,
    )
    return P, product_weights(n, p)


def _symmetric_part(S):
    S = S.tocsr()
    asym = abs(S - S.T).max() if S.nnz else 0.0
    if asym > 1e-12:
        raise NumericalFailure(f"symmetrized operator not symmetric (defect {asym:.2e})")
    return (S + S.T) * 0.5


def _lowest_eigenvalues(A, want):
    """Smallest eigenvalues of the PSD matrix ``A``; all of them for small dimensions."""
    dim = A.shape[0]
    if dim <= DENSE_MAX_DIM:
        return np.sort(la.eigvalsh(A.toarray())), True
    k = min(want, dim - 2)
    try:
        # plain Lanczos: shift-invert factorizations fill in badly on these hypercube-like graphs
        vals = sla.eigsh(A.tocsc(), k=k, which="SA", return_eigenvectors=False, tol=1e-13)
    except sla.ArpackNoConvergence:
        try:
            vals = sla.eigsh(A.tocsc(), k=k, sigma=-1e-3, which="LM", return_eigenvectors=False, tol=1e-14)
        except sla.ArpackNoConvergence as exc:
            raise NumericalFailure("sparse eigensolver did not converge") from exc
    return np.sort(vals), False


def _gap_of(A):
    want = 6
    while True:
        vals, complete = _lowest_eigenvalues(A, want)
        zero = int(np.sum(np.abs(vals) < KERNEL_TOL))
        if complete or zero < len(vals):
            break
        want *= 2
    if np.any(vals < -KERNEL_TOL):
        raise NumericalFailure("generator has a positive eigenvalue")
    positive = vals[vals >= KERNEL_TOL]
    gap = float(positive[0]) if positive.size else 0.0
    return gap, zero, vals if complete else None


def _reachable_class(gen):
    adj = gen.rates.copy()
    adj.setdiag(0)
    adj.eliminate_zeros()
    _, labels = csgraph.connected_components(adj, directed=True, connection="strong")
    return labels


def spectral_gap_exact(gen):
    """Gap of ``-Q`` on L^2(mu), kernel dimension and ergodicity."""
    A = _symmetric_part(-gen.symmetrized())
    gap, zero, spectrum = _gap_of(A)
    labels = _reachable_class(gen)
    n_classes = int(labels.max()) + 1
    ergodic = n_classes == 1 and zero == 1
    reachable_gap = gap
    if n_classes > 1:
        members = np.flatnonzero(labels == labels[gen.dim - 1])
        sub = A[members][:, members]
        if len(members) == 1:
            reachable_gap = 0.0
        else:
            reachable_gap, _, _ = _gap_of(sp.csr_matrix(sub))
    return SpectrumResult(gap, zero, ergodic, spectrum, reachable_gap)


def ergodicity_check(gen):
    """Simple zero eigenvalue, cross-checked against strong connectivity of the rate graph."""
    res = spectral_gap_exact(gen)
    labels = _reachable_class(gen)
    connected = int(labels.max()) == 0
    if connected != (res.kernel_dim == 1):
        raise NumericalFailure("kernel dimension disagrees with reachability")
    return connected


@dataclass(frozen=True)
class DiscreteGap:
    continuous: SpectrumResult
    discrete: SpectrumResult
    residual: float  # |gap - n gap_d|


def spectral_gap_discrete(model):
    """Gap ``1 - lambda_2`` of the discrete chain and the check ``gap = n * gap_d``."""
    P, w = build_discrete_kernel(model)
    s = np.sqrt(w)
    S = _symmetric_part(sp.diags(s) @ P @ sp.diags(1.0 / s))
    I = sp.identity(S.shape[0], format="csr")
    gap_d, zero, spectrum = _gap_of(sp.csr_matrix(I - S))
    discrete = SpectrumResult(gap_d, zero, zero == 1, None if spectrum is None else 1.0 - spectrum)
    continuous = spectral_gap_exact(build_generator(model))
    return DiscreteGap(continuous, discrete, abs(continuous.gap - model.n * gap_d))


def east_gap(length, p, bc=None):
    return spectral_gap_exact(build_generator(build_east_chain(length, bc, p))).gap


def gap_vs_q_scan(q_values):
    """Exact East gaps at ``ell = ceil(1/q)`` next to the shape ``q^-2 q^(log(1/q) / (2 log 2))``."""
    rows = []
    for q in q_values:
        ell = math.ceil(1.0 / q - 1e-12)
        gap = east_gap(ell, 1.0 - q)
        shape = q**-2 * q ** (math.log(1.0 / q) / (2 * math.log(2)))
        rows.append({"q": q, "ell": ell, "gap": gap, "bound_shape": shape, "ratio": gap / shape})
    return rows


def autocovariance(model, f, lags, n_samples, seed=Seed(), threads=1):
    """Stationary autocovariance of ``f`` at the given lags (start from mu)."""
    lags = np.asarray(lags, dtype=float)
    grid = np.concatenate([[0.0], lags])
    probs = initial_probabilities(model, InitialMeasureSpec.equilibrium())
    snaps = simulate_batch(model, probs, grid, seed, n_samples, threads=threads)
    vals = f(snaps)
    f0 = vals[:, :1]
    prod = (f0 - f0.mean()) * (vals[:, 1:] - vals[:, 1:].mean(axis=0))
    cov = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / math.sqrt(n_samples)
    return cov, se


def autocorrelation_rate(model, f, T, n_samples, seed=Seed(), n_lags=16, threads=1):
    """Exponential decay rate fitted to the stationary autocovariance of ``f`` on ``(0, T]``."""
    lags = np.linspace(T / n_lags, T, n_lags)
    cov, se = autocovariance(model, f, lags, n_samples, seed, threads)
    if not np.any(cov > 3 * se):
        raise FitFailure("autocovariance indistinguishable from zero")
    fit = fit_exponential_rate(list(zip(lags, cov, se)), tail=False)
    return fit.rate


def exact_autocovariance(model, f, lags):
    """``Cov_mu(f(eta_0), f(eta_t))`` from the spectral decomposition."""
    gen = build_generator(model)
    w = gen.weights
    n = model.n
    states = np.arange(gen.dim)
    cfg = ((states[:, None] >> np.arange(n)) & 1).astype(np.uint8)
    fv = f(np.concatenate([cfg, np.tile(model.frozen, (gen.dim, 1))], axis=1))
    s = np.sqrt(w)
    S = -(gen.symmetrized().toarray())
    evals, evecs = la.eigh((S + S.T) / 2)
    g = s * (fv - np.dot(w, fv))
    coef = (evecs.T @ g) ** 2
    return np.array([np.sum(coef * np.exp(-evals * t)) for t in np.atleast_1d(lags)]), evals, coef


def spectrum_csv(rows):
    """Rows of ``(model, p, ell, SpectrumResult)``."""
    out = ["model,p,ell,gap,kernel_dim,ergodic"]
    out += [f"{name},{p:g},{ell},{r.gap:.12g},{r.kernel_dim},{int(r.ergodic)}" for name, p, ell, r in rows]
    return "\n".join(out) + "\n"
