"""Horizon-asymptotic verification lab.

Finite-horizon equilibria converge to the discounted infinite-horizon one
at explicit exponential rates; this module measures those gaps on shared
ensembles (common paths make the comparisons nearly noise-free) and checks
them against the closed-form bounds. Distances between path laws restricted
to an initial window are computed exactly from the weight flows: TV is half
the mean absolute weight difference, relative entropy comes from the drift
fields via the change-of-measure identity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .bsde import solve_finite_horizon
from .control import discounted_reward_paths
from .equilibrium import EquilibriumReport, MeanFieldState, solve_equilibrium
from .games import GameSpec, maximize_hamiltonian
from .metrics import log_slope, symmetrized_entropy, w1_actions
from .paths import PathEnsemble


def solve_finite_mfg(spec: GameSpec, ensemble: PathEnsemble, t_horizon: float,
                     **kw) -> EquilibriumReport:
    """Finite-horizon equilibrium: same fixed-point machinery, zero terminal
    condition at t_horizon (which must sit on the ensemble grid)."""
    return solve_equilibrium(spec, ensemble, k_t=ensemble.index_of(t_horizon), **kw)


@dataclass(frozen=True)
class EpsGapResult:
    """Suboptimality of the restricted infinite-horizon control in the
    finite-horizon game it induces."""

    t_horizon: float
    value: float      # optimal value in the restricted environment
    reward: float     # reward of the restricted control there
    gap: float
    band: float       # 3-sigma joint bootstrap band for the gap
    bound: float      # 2 (M / lam) e^{-lam T}

    @property
    def within(self) -> bool:
        return self.gap <= self.bound + self.band


def epsilon_bound(spec: GameSpec, t_horizon: float) -> float:
    return 2.0 * spec.bounds.value_bound(spec.lam) * math.exp(-spec.lam * t_horizon)


def epsilon_gap(spec: GameSpec, report: EquilibriumReport, t_horizon: float,
                n_boot: int = 200, seed: int = 0, **solve_kw) -> EpsGapResult:
    """Measure how far the infinite-horizon equilibrium, cut at t_horizon, is
    from optimal in its own restricted environment.

    Value and reward are estimated on the same paths with the same
    quadrature, so the gap subtracts coherently; the band bootstraps paths
    jointly for both terms.
    """
    state = report.state
    ens = state.ensemble
    k_t = ens.index_of(t_horizon)
    if k_t > state.k_t:
        raise ValueError(f"t_horizon={t_horizon} exceeds the equilibrium horizon")
    env = state.restrict(k_t)
    sol = solve_finite_horizon(spec, ens, env.marginal, env.qlaw, k_t, **solve_kw)
    ctl = report.control.restrict(k_t)
    totals = discounted_reward_paths(spec, ens, env.marginal, env.qlaw, ctl, k_t)
    w = state.weights.weights(k_t)
    reward = float((w * totals).mean() / w.mean())
    gap = sol.value - reward
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    n = ens.n_paths
    idx = gen.integers(0, n, size=(n_boot, n))
    y0 = sol.y[:, 0]
    boots = y0[idx].mean(axis=1) - (w[idx] * totals[idx]).sum(axis=1) / w[idx].sum(axis=1)
    return EpsGapResult(t_horizon=t_horizon, value=sol.value, reward=reward, gap=gap,
                        band=3.0 * float(boots.std()), bound=epsilon_bound(spec, t_horizon))


# ---------------------------------------------------------------------------
# rate sweep


@dataclass(frozen=True)
class SweepRow:
    t_horizon: float
    t: float
    entropy_sym: float
    entropy_band: float
    entropy_bound: float
    tv: float
    tv_band: float
    tv_bound: float
    ctrl_dist: float
    ctrl_band: float
    ctrl_bound: float
    w1q: float
    w1q_bound: float
    converged: bool
    bounds_apply: bool


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    tv_slope: float          # fitted log-slope of measured TV in (T - t)
    tv_bound_slope: float    # same fit on the bound column (-lam/2 by construction)
    entropy_slope: float
    rate_denom: float        # m lam / (2 L^2) - delta
    assumptions_ok: bool
    notes: tuple[str, ...]

    def to_csv(self, path) -> None:
        cols = ["t_horizon", "t", "entropy_sym", "entropy_bound", "tv", "tv_bound",
                "ctrl_dist", "ctrl_bound", "w1q", "w1q_bound"]
        extra = ["entropy_band", "tv_band", "ctrl_band", "converged", "bounds_apply"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols + extra)
            for r in self.rows:
                w.writerow([getattr(r, c) for c in cols] + [getattr(r, c) for c in extra])


def _path_tv(w_a, w_b, k: int) -> tuple[float, float]:
    """Exact TV between the two reweighted path laws on the window sigma-field,
    with a 3-sigma band: TV = half the mean absolute weight difference."""
    diff = 0.5 * np.abs(w_a.weights(k) - w_b.weights(k))
    return float(diff.mean()), 3.0 * float(diff.std(ddof=1)) / math.sqrt(diff.size)


def _discounted_action_gap(spec: GameSpec, a: MeanFieldState, b: MeanFieldState,
                           k_t: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-path discounted squared action distance between two controls and
    the per-path average weight under which to integrate it."""
    dt = a.ensemble.dt
    gamma = math.exp(-spec.lam * dt)
    wstep = (1.0 - gamma) / spec.lam
    total = np.zeros(a.ensemble.n_paths)
    disc = wstep
    for k in range(k_t):
        da = a.control.actions(k) - b.control.actions(k)
        total += disc * (da**2).sum(axis=1)
        disc *= gamma
    w_avg = 0.5 * (a.weights.normalized(k_t) + b.weights.normalized(k_t))
    return total, w_avg


def rate_sweep(spec: GameSpec, ensemble: PathEnsemble, horizons: list[float],
               t_slices: list[float], tol: float = 1e-3, infinite: EquilibriumReport | None = None,
               **eq_kw) -> SweepResult:
    """Convergence-rate table of finite-horizon equilibria against the
    infinite-horizon one, per (T, t) window.

    Row quantities and their closed-form bounds (denom = m lam / (2 L^2) - delta):
    symmetrized window entropy vs 2 M e^{-lam (T-t)} / denom; window TV vs
    sqrt(M / (2 denom)) e^{-lam (T-t)/2}; discounted squared control distance
    vs (1 + delta/denom) 8 M e^{-lam T} / (lam m); discounted squared action-law
    W1 vs (8/m + (C_A^2 + 8 delta/m)/denom) M e^{-lam T} / lam. Bounds need the
    declared concavity; without it rows carry bounds_apply=False.
    """
    notes: list[str] = []
    bd = spec.bounds
    assumptions_ok = bd.concavity is not None and spec.drift_mu_free
    if bd.concavity is None:
        notes.append("no declared concavity modulus; rate bounds inapplicable")
        denom = math.nan
    else:
        denom = bd.concavity * spec.lam / (2.0 * bd.action_lip**2) - bd.mono_slack
        if denom <= 0:
            notes.append("monotonicity slack swallows the concavity margin; bounds inapplicable")
            assumptions_ok = False
    if not spec.drift_mu_free:
        notes.append("drift depends on the population law; rate bound hypotheses not met")
    if infinite is None:
        infinite = solve_equilibrium(spec, ensemble, tol=tol, **eq_kw)
    if infinite.flagged:
        notes.append("infinite-horizon equilibrium flagged; rows kept for diagnosis")
    m_over_lam = bd.value_bound(spec.lam)
    rows: list[SweepRow] = []
    for t_h in horizons:
        rep = solve_finite_mfg(spec, ensemble, t_h, **eq_kw)
        if rep.flagged:
            notes.append(f"finite-horizon solve at T={t_h} flagged")
        k_h = ensemble.index_of(t_h)
        ctrl_tot, ctrl_w = _discounted_action_gap(spec, rep.state, infinite.state, k_h)
        ctrl = float((ctrl_w * ctrl_tot).sum())
        boot = np.random.Generator(np.random.Philox(key=np.uint64(17)))
        idx = boot.integers(0, ctrl_tot.size, size=(100, ctrl_tot.size))
        ctrl_band = 3.0 * float(((ctrl_w[idx] * ctrl_tot[idx]).sum(axis=1)
                                 / ctrl_w[idx].sum(axis=1)).std())
        dt = ensemble.dt
        gamma = math.exp(-spec.lam * dt)
        wstep = (1.0 - gamma) / spec.lam
        w1q = 0.0
        disc = wstep
        for k in range(k_h):
            w1q += disc * w1_actions(rep.state.qlaw(k), infinite.state.qlaw(k)) ** 2
            disc *= gamma
        if assumptions_ok:
            ctrl_bound = (1.0 + bd.mono_slack / denom) * 8.0 * bd.reward \
                * math.exp(-spec.lam * t_h) / (spec.lam * bd.concavity)
            w1q_bound = (8.0 / bd.concavity + (bd.action_norm**2 + 8.0 * bd.mono_slack / bd.concavity)
                         / denom) * bd.reward * math.exp(-spec.lam * t_h) / spec.lam
        else:
            ctrl_bound = w1q_bound = math.nan
        for t in t_slices:
            if t > t_h - ensemble.dt / 2:
                continue
            k_t = ensemble.index_of(t)
            h_sym, h_band = symmetrized_entropy(rep.state.weights, infinite.state.weights, k_t)
            tv, tv_band = _path_tv(rep.state.weights, infinite.state.weights, k_t)
            if assumptions_ok:
                h_bound = 2.0 * bd.reward * math.exp(-spec.lam * (t_h - t)) / denom
                tv_bound = math.sqrt(bd.reward / (2.0 * denom)) * math.exp(-spec.lam * (t_h - t) / 2.0)
            else:
                h_bound = tv_bound = math.nan
            rows.append(SweepRow(
                t_horizon=t_h, t=t, entropy_sym=h_sym, entropy_band=h_band, entropy_bound=h_bound,
                tv=tv, tv_band=tv_band, tv_bound=tv_bound,
                ctrl_dist=ctrl, ctrl_band=ctrl_band, ctrl_bound=ctrl_bound,
                w1q=w1q, w1q_bound=w1q_bound,
                converged=not (rep.flagged or infinite.flagged), bounds_apply=assumptions_ok,
            ))
    gaps = [r.t_horizon - r.t for r in rows]
    tv_slope, _ = log_slope(gaps, [max(r.tv, 1e-12) for r in rows])
    ent_slope, _ = log_slope(gaps, [max(r.entropy_sym, 1e-15) for r in rows])
    if assumptions_ok:
        tvb_slope, _ = log_slope(gaps, [r.tv_bound for r in rows])
    else:
        tvb_slope = math.nan
    return SweepResult(rows=tuple(rows), tv_slope=tv_slope, tv_bound_slope=tvb_slope,
                       entropy_slope=ent_slope, rate_denom=denom,
                       assumptions_ok=assumptions_ok, notes=tuple(notes))


# ---------------------------------------------------------------------------
# strong concavity probe


@dataclass(frozen=True)
class ConcavityReport:
    worst_violation: float
    slack: float
    n_probes: int
    skipped: bool

    @property
    def passed(self) -> bool:
        return self.skipped or self.worst_violation <= self.slack


def strong_concavity_gap_check(spec: GameSpec, ensemble: PathEnsemble, marginal,
                               n_probes: int = 200, seed: int = 0) -> ConcavityReport:
    """Probe the quadratic growth of the action objective around its argmax:
    m-strong concavity forces |a - a*|^2 <= (4/m)(h(a*) - h(a)) for every
    grid action, up to squared-grid-spacing slack from the discretized a*.
    """
    if spec.bounds.concavity is None:
        return ConcavityReport(worst_violation=0.0, slack=0.0, n_probes=0, skipped=True)
    m = spec.bounds.concavity
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    z_scale = spec.bounds.value_bound(spec.lam)
    atoms = spec.actions.atoms
    worst = 0.0
    for _ in range(n_probes):
        k = int(gen.integers(0, ensemble.n_steps))
        i = int(gen.integers(0, ensemble.n_paths))
        z = gen.normal(0.0, z_scale, size=(1, ensemble.dim))
        sub = ensemble.states[i:i + 1]
        _, _, table = maximize_hamiltonian(spec, float(ensemble.times[k]), k, sub,
                                           marginal, z, return_table=True)
        h = table[0]
        star = int(np.argmax(h))
        viol = ((atoms - atoms[star]) ** 2).sum(axis=1) - (4.0 / m) * (h[star] - h)
        worst = max(worst, float(viol.max()))
    slack = spec.actions.spacing() ** 2 + 1e-9
    return ConcavityReport(worst_violation=worst, slack=slack, n_probes=n_probes, skipped=False)
