"""Distances and divergences between weighted sample laws.

Everything here consumes weighted atoms (states with measure weights, or
action laws on a grid); nothing re-simulates. Path-space relative entropy is
computed two independent ways from the same weight flows, and the pair is
required to agree within its own Monte Carlo bands, which is the main guard
against weight bugs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .games import ActionLaw, Marginal
from .paths import MeasureWeights


def equal_mass_edges(values: np.ndarray, weights: np.ndarray | None = None, bins: int = 64) -> np.ndarray:
    """Bin edges with (approximately) equal pooled mass per bin.

    Interior edges are weighted quantiles; outer edges are pushed past the
    data range so every sample lands in a bin. Duplicate quantiles (atoms
    with large mass) are collapsed, so fewer than `bins` bins can come back.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    if weights is None:
        weights = np.full(v.shape, 1.0 / max(v.size, 1))
    w = np.asarray(weights, dtype=float).reshape(-1)
    order = np.argsort(v, kind="stable")
    vs, ws = v[order], w[order]
    cdf = np.cumsum(ws)
    cdf /= cdf[-1]
    qs = np.arange(1, bins) / bins
    interior = vs[np.searchsorted(cdf, qs, side="left")]
    lo = vs[0] - 1e-9 * (1.0 + abs(vs[0]))
    hi = vs[-1] + 1e-9 * (1.0 + abs(vs[-1]))
    edges = np.concatenate([[lo], interior, [hi]])
    return np.unique(edges)


def binned_masses(values: np.ndarray, weights: np.ndarray | None, edges: np.ndarray) -> np.ndarray:
    """Normalized mass per bin; samples outside the edges clip to the end bins."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if weights is None:
        weights = np.full(v.shape, 1.0 / max(v.size, 1))
    w = np.asarray(weights, dtype=float).reshape(-1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, len(edges) - 2)
    masses = np.bincount(idx, weights=w, minlength=len(edges) - 1)
    return masses / masses.sum()


def tv_masses(pa: np.ndarray, pb: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(pa) - np.asarray(pb)).sum())


def tv_binned(a: Marginal, b: Marginal, bins: int = 64) -> float:
    """Total variation between two weighted 1-d sample laws on shared
    equal-mass bins of the pooled sample (coordinate 0 for d > 1 is not
    supported; callers bin each coordinate themselves)."""
    va, vb = a.atoms.reshape(len(a.atoms), -1), b.atoms.reshape(len(b.atoms), -1)
    if va.shape[1] != 1 or vb.shape[1] != 1:
        raise ValueError("binned TV is defined for scalar states")
    pooled = np.concatenate([va[:, 0], vb[:, 0]])
    pooled_w = np.concatenate([a.weights * 0.5, b.weights * 0.5])
    edges = equal_mass_edges(pooled, pooled_w, bins)
    return tv_masses(binned_masses(va[:, 0], a.weights, edges),
                     binned_masses(vb[:, 0], b.weights, edges))


def kl_binned(a: Marginal, b: Marginal, bins: int = 64, floor: float = 1e-12) -> float:
    """Binned state-space KL(a||b) on pooled equal-mass bins. The floor keeps
    empty b-bins finite, so this is a (slightly damped) lower-bound proxy."""
    va, vb = a.atoms.reshape(len(a.atoms), -1), b.atoms.reshape(len(b.atoms), -1)
    pooled = np.concatenate([va[:, 0], vb[:, 0]])
    pooled_w = np.concatenate([a.weights * 0.5, b.weights * 0.5])
    edges = equal_mass_edges(pooled, pooled_w, bins)
    pa = binned_masses(va[:, 0], a.weights, edges)
    pb = np.maximum(binned_masses(vb[:, 0], b.weights, edges), floor)
    mask = pa > 0
    return float((pa[mask] * np.log(pa[mask] / pb[mask])).sum())


# ---------------------------------------------------------------------------
# path-space relative entropy


@dataclass(frozen=True)
class EntropyEstimate:
    """Relative entropy between two path measures over a shared ensemble.

    `quadratic` integrates half the squared drift gap under the first
    measure; `loglik` averages the log-density ratio. Both are
    self-normalized importance-sampling estimates with 3-sigma bands, and
    `agree` records whether they overlap.
    """

    quadratic: float | None
    quadratic_band: float | None
    loglik: float
    loglik_band: float
    agree: bool

    @property
    def value(self) -> float:
        return self.loglik if self.quadratic is None else 0.5 * (self.quadratic + self.loglik)


def _weighted_mean_band(g: np.ndarray, w_norm: np.ndarray) -> tuple[float, float]:
    est = float((w_norm * g).sum())
    se = math.sqrt(float(((w_norm * (g - est)) ** 2).sum()))
    return est, 3.0 * se


def relative_entropy_paths(w_a: MeasureWeights, w_b: MeasureWeights,
                           increments: np.ndarray | None = None,
                           k_t: int | None = None) -> EntropyEstimate:
    """H(A | B) on the path sigma-field up to k_t.

    The quadratic estimator needs both drift fields (None for mixtures, in
    which case only the log-likelihood route is available). `increments` is
    unused but accepted so call sites can pass the ensemble steps uniformly.
    """
    k_t = w_a.k_horizon if k_t is None else k_t
    if w_b.k_horizon < k_t:
        raise ValueError("second weight flow is shorter than the requested horizon")
    wn = w_a.normalized(k_t)
    g_log = np.log(w_a.weights(k_t)) - np.log(w_b.weights(k_t))
    ll, ll_band = _weighted_mean_band(g_log, wn)
    if w_a.drift is None or w_b.drift is None:
        return EntropyEstimate(None, None, ll, ll_band, agree=True)
    dt = float(w_a.times[1] - w_a.times[0])
    diff = w_a.drift[:, :k_t] - w_b.drift[:, :k_t]
    g_quad = 0.5 * (diff**2).sum(axis=(1, 2)) * dt
    qd, qd_band = _weighted_mean_band(g_quad, wn)
    agree = abs(qd - ll) <= qd_band + ll_band + 1e-12
    return EntropyEstimate(qd, qd_band, ll, ll_band, agree)


def _value_band(est: EntropyEstimate) -> float:
    # mirror EntropyEstimate.value: averaged estimators average their bands
    if est.quadratic_band is None:
        return est.loglik_band
    return 0.5 * (est.quadratic_band + est.loglik_band)


def symmetrized_entropy(w_a: MeasureWeights, w_b: MeasureWeights, k_t: int | None = None) -> tuple[float, float]:
    """H(A|B) + H(B|A) with a combined 3-sigma band."""
    ab = relative_entropy_paths(w_a, w_b, k_t=k_t)
    ba = relative_entropy_paths(w_b, w_a, k_t=k_t)
    return ab.value + ba.value, _value_band(ab) + _value_band(ba)


def pinsker_tv_bound(entropy: float) -> tuple[float, bool]:
    """TV upper bound sqrt(H/2); negative noise-level entropies clamp to 0."""
    clamped = entropy < 0.0
    return math.sqrt(max(entropy, 0.0) / 2.0), clamped


# ---------------------------------------------------------------------------
# Wasserstein-1 between action laws


def w1_actions(a: ActionLaw, b: ActionLaw) -> float:
    """Exact W1 between two grid action laws.

    Scalar actions use the CDF-difference integral; multi-d uses the
    transport linear program (small grids only).
    """
    if a.atoms.shape[1] == 1:
        atoms = np.concatenate([a.atoms[:, 0], b.atoms[:, 0]])
        order = np.argsort(atoms, kind="stable")
        masses = np.concatenate([a.masses, -b.masses])[order]
        atoms = atoms[order]
        cdf_gap = np.cumsum(masses)[:-1]
        return float(np.abs(cdf_gap * np.diff(atoms)).sum())
    from scipy.optimize import linprog

    na, nb = len(a.masses), len(b.masses)
    cost = np.sqrt(((a.atoms[:, None, :] - b.atoms[None, :, :]) ** 2).sum(axis=2)).reshape(-1)
    # transport polytope: row sums = a.masses, col sums = b.masses
    a_eq = np.zeros((na + nb, na * nb))
    for i in range(na):
        a_eq[i, i * nb:(i + 1) * nb] = 1.0
    for j in range(nb):
        a_eq[na + j, j::nb] = 1.0
    res = linprog(cost, A_eq=a_eq, b_eq=np.concatenate([a.masses, b.masses]),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


# ---------------------------------------------------------------------------
# small shared statistics helpers


def log_slope(xs, ys, floor: float = 1e-300) -> tuple[float, float]:
    """Least-squares slope/intercept of log(y) against x (y floored).
    Undefined (nan, nan) with fewer than two distinct abscissae."""
    xs = np.asarray(xs, dtype=float)
    ly = np.log(np.maximum(np.asarray(ys, dtype=float), floor))
    if np.unique(xs).size < 2:
        return math.nan, math.nan
    slope, intercept = np.polyfit(xs, ly, 1)
    return float(slope), float(intercept)


def bootstrap_band(values: np.ndarray, weights: np.ndarray | None = None,
                   n_boot: int = 200, seed: int = 0) -> float:
    """3-sigma band for a (weighted) mean by path-level resampling."""
    v = np.asarray(values, dtype=float)
    n = v.size
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    idx = gen.integers(0, n, size=(n_boot, n))
    if weights is None:
        boots = v[idx].mean(axis=1)
    else:
        w = np.asarray(weights, dtype=float)
        boots = (w[idx] * v[idx]).sum(axis=1) / w[idx].sum(axis=1)
    return 3.0 * float(boots.std())
