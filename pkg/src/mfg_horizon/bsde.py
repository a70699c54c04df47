"""Backward solver for the discounted control problem on a frozen ensemble.

The time-rescaled backward equation is stepped on the same grid as the
ensemble with exact exponential discounting: with gamma = exp(-lam dt) and
step weight w = (1 - gamma)/lam,

    Y_k = clamp( gamma E[Y_{k+1} | F_k] + w H(t_k, X, mu_k, q_k, Z_k),  M/lam )
    Z_k = gamma E[(Y_{k+1} - E[Y_{k+1}|F_k]) dW_k | F_k] / dt

so a constant reward c integrates to the closed form c (1 - e^{-lam T})/lam
with no quadrature error. Conditional expectations are projections: global
polynomials (SVD-truncated when the design degenerates), equal-count local
averages, or exact scenario-prefix means on enumerated binomial trees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .games import ActionLaw, GameSpec, Marginal, maximize_hamiltonian
from .paths import PathEnsemble

MarginalAt = Callable[[int], Marginal]
QLawAt = Callable[[int], ActionLaw | None]


def required_horizon(spec: GameSpec, tol: float) -> float:
    """Truncation horizon certifying |Y_0 - Y_0^T| <= tol/2: the tail of the
    discounted reward past T is at most (M/lam) e^{-lam T}."""
    m_over_lam = spec.bounds.value_bound(spec.lam)
    return math.log(2.0 * m_over_lam / tol) / spec.lam


def required_steps(spec: GameSpec, dt: float, tol: float) -> int:
    return max(1, int(math.ceil(required_horizon(spec, tol) / dt - 1e-12)))


@dataclass(frozen=True)
class TruncationCertificate:
    """Record of the horizon actually used and the tail bound it certifies."""

    t_used: float
    k_used: int
    tol_requested: float
    tail_bound: float  # (M/lam) e^{-lam t_used}

    @property
    def ok(self) -> bool:
        return self.tail_bound <= self.tol_requested / 2.0 + 1e-15


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Backward pass output: value process, martingale integrand, argmax."""

    y: np.ndarray            # (N, k_t + 1)
    z: np.ndarray            # (N, k_t, d)
    argmax_idx: np.ndarray   # (N, k_t) action indices chosen at each step
    times: np.ndarray
    value: float             # mean of Y_0 over the ensemble
    k_t: int
    conditioning: str
    clamp_fraction: float    # share of (path, step) entries hit by the bound
    degenerate_steps: tuple[int, ...]  # steps where the design lost rank


class _PolyFitter:
    """Least-squares projection on monomials of the state up to `degree`.

    Features are standardized per coordinate; coordinates with no spread
    (point initial law at k = 0) drop out, leaving at worst the constant,
    which is the correct conditional mean there. Rank decisions use a
    relative SVD cutoff, so near-collinear designs degrade instead of
    exploding.
    """

    def __init__(self, x: np.ndarray, degree: int):
        n, d = x.shape
        cols = [np.ones(n)]
        std = x.std(axis=0)
        live = std > 1e-12
        zx = (x[:, live] - x[:, live].mean(axis=0)) / std[live]
        for p in range(1, degree + 1):
            for j in range(zx.shape[1]):
                cols.append(zx[:, j] ** p)
        if zx.shape[1] > 1:  # pairwise cross terms at degree >= 2
            for i in range(zx.shape[1]):
                for j in range(i + 1, zx.shape[1]):
                    cols.append(zx[:, i] * zx[:, j])
        design = np.column_stack(cols)
        u, s, _ = np.linalg.svd(design, full_matrices=False)
        keep = s > s[0] * 1e-10
        self.q = u[:, keep]
        self.full_rank = bool(keep.all())

    def fit(self, targets: np.ndarray) -> np.ndarray:
        return self.q @ (self.q.T @ targets)


class _BinnedFitter:
    """Equal-count local averages on scalar states (coarse, always stable)."""

    def __init__(self, x: np.ndarray, bins: int):
        if x.shape[1] != 1:
            raise ValueError("binned conditioning is defined for scalar states")
        v = x[:, 0]
        qs = np.quantile(v, np.linspace(0, 1, bins + 1)[1:-1])
        self.idx = np.searchsorted(qs, v, side="right")
        self.n_bins = len(qs) + 1
        self.counts = np.bincount(self.idx, minlength=self.n_bins)
        self.full_rank = True

    def fit(self, targets: np.ndarray) -> np.ndarray:
        t2 = targets.reshape(targets.shape[0], -1)
        out = np.empty_like(t2)
        for j in range(t2.shape[1]):
            sums = np.bincount(self.idx, weights=t2[:, j], minlength=self.n_bins)
            out[:, j] = (sums / np.maximum(self.counts, 1))[self.idx]
        return out.reshape(targets.shape)


class _ExactFitter:
    """Scenario-prefix group means on an enumerated binomial tree."""

    def __init__(self, group_ids: np.ndarray):
        self.idx = group_ids
        self.n_groups = int(group_ids.max()) + 1
        self.counts = np.bincount(group_ids, minlength=self.n_groups)
        self.full_rank = True

    def fit(self, targets: np.ndarray) -> np.ndarray:
        t2 = targets.reshape(targets.shape[0], -1)
        out = np.empty_like(t2)
        for j in range(t2.shape[1]):
            sums = np.bincount(self.idx, weights=t2[:, j], minlength=self.n_groups)
            out[:, j] = (sums / self.counts)[self.idx]
        return out.reshape(targets.shape)


def _scenario_groups(ensemble: PathEnsemble, k: int) -> np.ndarray:
    """Group id of each path from the signs of its first k increments
    (bit j set = up-move at step j); k = 0 is the single root group."""
    if ensemble.dim != 1:
        raise ValueError("exact conditioning requires scalar noise")
    if k == 0:
        return np.zeros(ensemble.n_paths, dtype=np.int64)
    bits = (ensemble.increments[:, :k, 0] > 0).astype(np.int64)
    return bits @ (1 << np.arange(k, dtype=np.int64))


def solve_finite_horizon(spec: GameSpec, ensemble: PathEnsemble, marginal_at: MarginalAt,
                         qlaw_at: QLawAt | None, k_t: int, conditioning: str = "poly",
                         degree: int = 3, bins: int = 32) -> BsdeSolution:
    """Backward pass with zero terminal condition at grid index k_t.

    The maximizer never sees q: rewards split additively, so the argmax and
    Z are q-free and the mixed term enters the value as a scalar shift.
    """
    if k_t > ensemble.n_steps:
        raise ValueError(f"k_t={k_t} exceeds the ensemble horizon {ensemble.n_steps}")
    if conditioning not in ("poly", "binned", "exact"):
        raise ValueError(f"unknown conditioning {conditioning!r}")
    if conditioning == "exact" and ensemble.noise != "binomial":
        raise ValueError("exact conditioning needs an enumerated binomial ensemble")
    n, d = ensemble.n_paths, ensemble.dim
    dt = ensemble.dt
    gamma = math.exp(-spec.lam * dt)
    wstep = (1.0 - gamma) / spec.lam
    ybound = spec.bounds.value_bound(spec.lam)
    y = np.zeros((n, k_t + 1))
    z = np.zeros((n, k_t, d))
    argmax_idx = np.zeros((n, k_t), dtype=np.int16)
    clamp_hits = 0
    degenerate: list[int] = []
    for k in range(k_t - 1, -1, -1):
        x_k = ensemble.states[:, k]
        if conditioning == "poly":
            fitter = _PolyFitter(x_k, degree)
        elif conditioning == "binned":
            fitter = _BinnedFitter(x_k, bins)
        else:
            fitter = _ExactFitter(_scenario_groups(ensemble, k))
        if not fitter.full_rank:
            degenerate.append(k)
        y_next = y[:, k + 1]
        ey = fitter.fit(y_next)
        resid = y_next - ey
        z[:, k] = gamma * fitter.fit(resid[:, None] * ensemble.increments[:, k]) / dt
        t_k = float(ensemble.times[k])
        mu_k = marginal_at(k)
        idx, hvals = maximize_hamiltonian(spec, t_k, k, ensemble.states, mu_k, z[:, k])
        argmax_idx[:, k] = idx
        if spec.reward_mix is not None and qlaw_at is not None:
            q_k = qlaw_at(k)
            if q_k is not None:
                hvals = hvals + float(spec.reward_mix(t_k, mu_k, q_k))
        raw = gamma * ey + wstep * hvals
        y[:, k] = np.clip(raw, -ybound, ybound)
        clamp_hits += int((np.abs(raw) > ybound).sum())
    return BsdeSolution(
        y=y, z=z, argmax_idx=argmax_idx, times=ensemble.times[: k_t + 1].copy(),
        value=float(y[:, 0].mean()), k_t=k_t, conditioning=conditioning,
        clamp_fraction=clamp_hits / max(n * k_t, 1), degenerate_steps=tuple(reversed(degenerate)),
    )


def solve_infinite_horizon(spec: GameSpec, ensemble: PathEnsemble, marginal_at: MarginalAt,
                           qlaw_at: QLawAt | None, tol: float, conditioning: str = "poly",
                           degree: int = 3, bins: int = 32) -> tuple[BsdeSolution, TruncationCertificate]:
    """Discounted infinite-horizon value via certified truncation.

    Raises if the ensemble is shorter than the certificate requires: callers
    size ensembles with `required_steps` from the same tolerance.
    """
    k_req = required_steps(spec, ensemble.dt, tol)
    if k_req > ensemble.n_steps:
        raise ValueError(
            f"ensemble covers {ensemble.n_steps} steps but the tolerance {tol} "
            f"requires {k_req}; simulate with t_max >= {required_horizon(spec, tol):.3f}")
    sol = solve_finite_horizon(spec, ensemble, marginal_at, qlaw_at, k_req,
                               conditioning=conditioning, degree=degree, bins=bins)
    t_used = k_req * ensemble.dt
    tail = spec.bounds.value_bound(spec.lam) * math.exp(-spec.lam * t_used)
    return sol, TruncationCertificate(t_used=t_used, k_used=k_req, tol_requested=tol, tail_bound=tail)


def stability_probe(spec: GameSpec, ensemble: PathEnsemble,
                    flows: list[tuple[MarginalAt, QLawAt | None]],
                    target: tuple[MarginalAt, QLawAt | None],
                    k_t: int, **solve_kw) -> list[float]:
    """Mean pathwise gap E|Y_0^n - Y_0^*| along a sequence of measure flows.

    Continuity of the value in the population argument shows up as this
    sequence decaying when the flows converge to the target.
    """
    ref = solve_finite_horizon(spec, ensemble, target[0], target[1], k_t, **solve_kw)
    gaps = []
    for marginal_at, qlaw_at in flows:
        sol = solve_finite_horizon(spec, ensemble, marginal_at, qlaw_at, k_t, **solve_kw)
        gaps.append(float(np.abs(sol.y[:, 0] - ref.y[:, 0]).mean()))
    return gaps


@dataclass(frozen=True)
class TruncationDecay:
    """Horizon sweep of the truncated value against a long reference."""

    horizons: tuple[float, ...]
    values: tuple[float, ...]
    reference_horizon: float
    reference_value: float
    gaps: tuple[float, ...]
    slope: float          # fitted log-gap slope in T
    target_slope: float   # -lam

    @property
    def slope_ratio(self) -> float:
        return self.slope / self.target_slope


def truncation_decay(spec: GameSpec, ensemble: PathEnsemble, marginal_at: MarginalAt,
                     qlaw_at: QLawAt | None, horizons: list[float], t_ref: float,
                     **solve_kw) -> TruncationDecay:
    """Measure |Y_0^T - Y_0^{T_ref}| over horizons on one shared ensemble.

    Common paths make the gaps nearly noise-free, so the exponential tail
    rate is identifiable from a handful of horizons.
    """
    from .metrics import log_slope

    k_ref = ensemble.index_of(t_ref)
    ref = solve_finite_horizon(spec, ensemble, marginal_at, qlaw_at, k_ref, **solve_kw)
    values, gaps = [], []
    for t in horizons:
        sol = solve_finite_horizon(spec, ensemble, marginal_at, qlaw_at, ensemble.index_of(t), **solve_kw)
        values.append(sol.value)
        gaps.append(abs(sol.value - ref.value))
    slope, _ = log_slope(horizons, gaps)
    return TruncationDecay(horizons=tuple(horizons), values=tuple(values),
                           reference_horizon=t_ref, reference_value=ref.value,
                           gaps=tuple(gaps), slope=slope, target_slope=-spec.lam)
