"""Stationary and invariant games: ergodic averaging of the controlled flow.

The long-run machinery works on a fixed uniform histogram grid. Forward
controlled dynamics are simulated streaming (histograms accumulate per step,
paths are never stored), with noise keyed by (seed, step) so results do not
depend on chunking. Everything here is scalar-state: the registry games and
the shell geometry diagnostics are 1-d, and the binning would need a
different data structure anyway beyond that.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .bsde import required_steps, solve_infinite_horizon
from .control import FeedbackPolicy, control_weights, extract_optimal_control, fit_feedback
from .games import GameSpec, Marginal
from .metrics import tv_masses
from .paths import simulate_ensemble, step_generator


class StationaryError(RuntimeError):
    """Raised when the recurrence prerequisites fail (no drift condition)."""


def uniform_edges(lo: float, hi: float, bins: int) -> np.ndarray:
    return np.linspace(lo, hi, bins + 1)


def centers_of(edges: np.ndarray) -> np.ndarray:
    return 0.5 * (edges[:-1] + edges[1:])


def _hist(x: np.ndarray, lo: float, inv_w: float, bins: int) -> np.ndarray:
    idx = np.clip(((x - lo) * inv_w).astype(np.int64), 0, bins - 1)
    return np.bincount(idx, minlength=bins).astype(float)


# ---------------------------------------------------------------------------
# drift condition


@dataclass(frozen=True)
class DriftConditionReport:
    min_margin: float
    declared_margin: float
    witness: tuple[float, float, int] | None  # (x, first action coord, marginal index)
    norm_cap_ok: bool       # declared Lambda really dominates |b|, |vol|, |1/vol| on the ball
    worst_norm: float
    passed: bool


def check_drift_condition(spec: GameSpec, marginals: list[Marginal] | None = None,
                          n_x: int = 201) -> DriftConditionReport:
    """Scan -(x b + tr(vol vol^T)/2) over the shell |x| in [R', 2R], all grid
    actions, and the supplied interaction marginals; pass iff the minimum
    beats the declared margin. Also audits the declared norm cap on B(0, R).
    """
    st = spec.stationary
    if st is None:
        raise StationaryError("game declares no stationary geometry")
    if spec.dim != 1:
        raise StationaryError("the shell scan is implemented for scalar states")
    if marginals is None:
        marginals = [Marginal(np.array([[0.0]])),
                     Marginal(np.array([[1.5]])), Marginal(np.array([[-1.5]]))]
    half = np.linspace(st.r_inner, 2.0 * st.r_outer, n_x)
    xs = np.concatenate([-half[::-1], half])
    paths = xs.reshape(-1, 1, 1)
    atoms = spec.actions.atoms
    best = math.inf
    witness = None
    for mi, mu in enumerate(marginals):
        vol = np.asarray(spec.vol(0.0, 0, paths), dtype=float)
        tr_sigma = (vol**2 if vol.ndim == 0 else (vol**2).reshape(len(xs), -1).sum(axis=1))
        for a in atoms:
            a_rep = np.broadcast_to(a, (len(xs), len(a)))
            b = np.asarray(spec.drift(0.0, 0, paths, mu, a_rep), dtype=float).reshape(len(xs), -1)
            margin = -(xs * b[:, 0] + 0.5 * tr_sigma)
            j = int(np.argmin(margin))
            if margin[j] < best:
                best = float(margin[j])
                witness = (float(xs[j]), float(a[0]), mi)
    # norm cap audit on the ball |x| <= R
    ball = np.linspace(-st.r_outer, st.r_outer, n_x).reshape(-1, 1, 1)
    worst_norm = 0.0
    for mu in marginals:
        vol = np.asarray(spec.vol(0.0, 0, ball), dtype=float)
        vol_flat = np.abs(np.atleast_1d(vol)).reshape(-1)
        worst_norm = max(worst_norm, float(vol_flat.max()), float((1.0 / vol_flat).max()))
        for a in atoms:
            a_rep = np.broadcast_to(a, (ball.shape[0], len(a)))
            b = np.asarray(spec.drift(0.0, 0, ball, mu, a_rep), dtype=float)
            worst_norm = max(worst_norm, float(np.abs(b).max()))
    ok = best >= st.margin - 1e-9
    return DriftConditionReport(min_margin=best, declared_margin=st.margin,
                                witness=None if ok else witness,
                                norm_cap_ok=worst_norm <= st.lam_cap + 1e-9,
                                worst_norm=worst_norm, passed=ok)


def cycle_lower_bound(spec: GameSpec) -> float:
    """Closed-form lower bound on the mean inner-to-outer travel time:
    (R^2 - R'^2) / (2 R Lambda + d Lambda^2)."""
    st = spec.stationary
    return (st.r_outer**2 - st.r_inner**2) / (2.0 * st.r_outer * st.lam_cap
                                              + spec.dim * st.lam_cap**2)


# ---------------------------------------------------------------------------
# Cesaro averaging


def cesaro_operator(flow_masses: np.ndarray, dt: float, t_avg: float | None = None) -> np.ndarray:
    """Trapezoidal time-average of a marginal flow given as per-step masses
    (rows normalized); linear in the flow and exact on constants."""
    m = np.asarray(flow_masses, dtype=float)
    k = m.shape[0] - 1 if t_avg is None else int(round(t_avg / dt))
    if k < 1 or k > m.shape[0] - 1:
        raise ValueError("averaging horizon outside the flow")
    out = m[0] * 0.5 + m[1:k].sum(axis=0) + m[k] * 0.5
    return out / k


@dataclass(frozen=True)
class StationaryEstimate:
    """Cesaro average of the controlled marginal flow with a heuristic 1/T
    error certificate fitted from doubling residuals."""

    edges: np.ndarray
    masses: np.ndarray
    t_average: float
    n_paths: int
    gamma_hat: float                      # fitted constant in error ~ gamma/T
    certificate_error: float              # gamma_hat / t_average, labeled heuristic
    doublings: tuple[tuple[float, float], ...]  # (T_half, tv(D^{T_half}, D^{T}))
    mean: float
    second_moment: float

    @property
    def centers(self) -> np.ndarray:
        return centers_of(self.edges)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "mass"])
            for c, m in zip(self.centers, self.masses):
                w.writerow([repr(float(c)), repr(float(m))])


def _zero_policy(spec: GameSpec):
    """Constant policy at the grid atom nearest the origin."""
    j = int(np.argmin((spec.actions.atoms**2).sum(axis=1)))
    atom = spec.actions.atoms[j]

    def policy(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(atom, (len(x), len(atom)))

    return policy


def _simulate_flow(spec: GameSpec, interaction: Marginal, policy, x0: np.ndarray,
                   t_max: float, dt: float, seed: int, edges: np.ndarray,
                   checkpoints: tuple[float, ...] = (), trace_ref: np.ndarray | None = None,
                   trace_stride: int = 1):
    """Streaming Euler flow of the controlled scalar SDE.

    Returns the trapezoid Cesaro accumulator at each checkpoint plus the
    final horizon, and (optionally) the instantaneous-TV trace against a
    reference mass vector. Interaction and policy are time-constant.
    """
    if not spec.time_homogeneous:
        raise StationaryError("long-run averaging needs time-homogeneous coefficients")
    n = len(x0)
    bins = len(edges) - 1
    lo, inv_w = float(edges[0]), bins / float(edges[-1] - edges[0])
    k_steps = int(round(t_max / dt))
    ck = sorted(set(int(round(t / dt)) for t in checkpoints) | {k_steps})
    x = x0.copy()
    sqdt = math.sqrt(dt)
    h = _hist(x, lo, inv_w, bins) / n
    acc = 0.5 * h
    out_masses: dict[int, np.ndarray] = {}
    trace: list[tuple[float, float]] = []
    if trace_ref is not None:
        trace.append((0.0, tv_masses(h, trace_ref)))
    mean_acc = float(x.mean()) * 0.5
    m2_acc = float((x**2).mean()) * 0.5
    pbuf = x.reshape(n, 1, 1)
    for k in range(1, k_steps + 1):
        a = policy(x)
        b = np.asarray(spec.drift(0.0, 0, pbuf, interaction, a), dtype=float).reshape(n, -1)[:, 0]
        vol = np.asarray(spec.vol(0.0, 0, pbuf), dtype=float)
        sig = float(vol) if vol.ndim == 0 else np.atleast_1d(vol).reshape(-1)
        xi = step_generator(seed, k).standard_normal(n)
        x = x + b * dt + sig * xi * sqdt
        pbuf = x.reshape(n, 1, 1)
        h = _hist(x, lo, inv_w, bins) / n
        wgt = 0.5 if k == k_steps else 1.0
        acc = acc + wgt * h
        mean_acc += wgt * float(x.mean())
        m2_acc += wgt * float((x**2).mean())
        if trace_ref is not None and k % trace_stride == 0:
            trace.append((k * dt, tv_masses(h, trace_ref)))
        if k in ck:
            # checkpoint Cesaro uses trapezoid ends: subtract the half tail
            cmass = acc - (0.0 if k == k_steps else 0.5 * h)
            out_masses[k] = cmass / k
    return {
        "cesaro": out_masses,  # keyed by step index
        "final": out_masses[k_steps],
        "mean": mean_acc / k_steps,
        "second_moment": m2_acc / k_steps,
        "trace": trace,
    }


def estimate_stationary(spec: GameSpec, interaction: Marginal, policy,
                        t_average: float, n_paths: int, dt: float = 0.02,
                        seed: int = 0, edges: np.ndarray | None = None,
                        x0: np.ndarray | None = None) -> StationaryEstimate:
    """Cesaro-average the controlled flow and fit the 1/T certificate from
    internal doublings (T/4 vs T/2 vs T). Hard error if the drift condition
    fails: without recurrence the average estimates nothing.
    """
    rep = check_drift_condition(spec, [interaction])
    if not rep.passed:
        raise StationaryError(f"drift condition failed: margin {rep.min_margin:.4f} "
                              f"< declared {rep.declared_margin:.4f} at {rep.witness}")
    if edges is None:
        edges = uniform_edges(-6.0, 6.0, 160)
    if policy is None:
        policy = _zero_policy(spec)
    if x0 is None:
        x0 = np.zeros(n_paths)
    res = _simulate_flow(spec, interaction, policy, x0, t_average, dt, seed, edges,
                         checkpoints=(t_average / 4.0, t_average / 2.0))
    ces = res["cesaro"]
    pairs = []
    for t_half in (t_average / 4.0, t_average / 2.0):
        k_half, k_full = int(round(t_half / dt)), int(round(2.0 * t_half / dt))
        if k_half in ces and k_full in ces:
            pairs.append((t_half, tv_masses(ces[k_half], ces[k_full])))
    # |D^T - mu| ~ gamma/T makes tv(D^{T/2}, D^T) ~ gamma/T, so gamma ~ tv * T
    gamma_hat = float(np.mean([2.0 * t_half * tv for t_half, tv in pairs])) if pairs else math.nan
    return StationaryEstimate(
        edges=edges, masses=res["final"], t_average=t_average, n_paths=n_paths,
        gamma_hat=gamma_hat, certificate_error=gamma_hat / t_average, doublings=tuple(pairs),
        mean=res["mean"], second_moment=res["second_moment"],
    )


def sample_from_masses(edges: np.ndarray, masses: np.ndarray, n: int,
                       seed: int, lane: int = 9) -> np.ndarray:
    """Inverse-CDF samples from a histogram law, uniform within bins."""
    gen = step_generator(seed, 0, lane=lane)
    u = gen.random(n)
    cdf = np.concatenate([[0.0], np.cumsum(masses)])
    cdf /= cdf[-1]
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(masses) - 1)
    frac = (u - cdf[idx]) / np.maximum(cdf[idx + 1] - cdf[idx], 1e-300)
    return edges[idx] + frac * (edges[idx + 1] - edges[idx])


# ---------------------------------------------------------------------------
# stationary and invariant game solves


@dataclass
class StationaryIterationRow:
    iteration: int
    residual_tv: float
    value: float
    gamma_hat: float


@dataclass(eq=False)
class StationaryReport:
    """Outer fixed point of (interaction marginal -> Cesaro law of the best
    response): the stationary game solution at histogram resolution."""

    edges: np.ndarray
    masses: np.ndarray
    interaction: Marginal
    policy: FeedbackPolicy
    estimate: StationaryEstimate
    value: float
    certificate: object
    drift_report: DriftConditionReport
    converged: bool
    iterations: int
    history: list[StationaryIterationRow]

    @property
    def flagged(self) -> bool:
        return not self.converged


def solve_stationary_mfg(spec: GameSpec, tol: float = 0.02, max_outer: int = 8,
                         n_bsde: int = 12000, dt_bsde: float = 0.05, tol_bsde: float = 1e-3,
                         n_sim: int = 30000, dt_sim: float = 0.02, t_average: float = 64.0,
                         edges: np.ndarray | None = None, policy_bins: int = 64,
                         seed: int = 0, init_masses: np.ndarray | None = None,
                         conditioning: str = "poly") -> StationaryReport:
    """Outer iteration on the time-constant interaction marginal.

    Each round solves the discounted control problem against the frozen
    marginal (fresh driftless ensemble per round), projects the optimal
    control to a stationary feedback, Cesaro-averages the controlled flow,
    and feeds the average back in; stops when consecutive averages agree in
    TV. The forward simulations share one noise key, so consecutive rounds
    differ only through the policy and the residual is not MC-floor-limited.
    """
    drift_rep = check_drift_condition(spec)
    if not drift_rep.passed:
        raise StationaryError(f"drift condition failed with margin {drift_rep.min_margin:.4f}")
    if edges is None:
        edges = uniform_edges(-6.0, 6.0, 160)
    cts = centers_of(edges)
    if init_masses is None:
        dens = np.exp(-0.5 * cts**2)
        init_masses = dens / dens.sum()
    masses = init_masses
    t_bsde = required_steps(spec, dt_bsde, tol_bsde) * dt_bsde
    history: list[StationaryIterationRow] = []
    converged = False
    policy = estimate = sol = cert = None
    for it in range(1, max_outer + 1):
        mu = Marginal(cts.reshape(-1, 1), masses)
        ens = simulate_ensemble(spec, n_bsde, t_bsde, dt_bsde, seed + 1000 * it)
        sol, cert = solve_infinite_horizon(spec, ens, lambda k: mu, None, tol_bsde,
                                           conditioning=conditioning)
        ctl = extract_optimal_control(spec, sol)
        wts = control_weights(spec, ens, lambda k: mu, ctl, sol.k_t)
        policy = fit_feedback(spec, ens, ctl, wts, bins=policy_bins, k_max=sol.k_t // 2)
        estimate = estimate_stationary(spec, mu, policy, t_average, n_sim, dt_sim,
                                       seed=seed + 7, edges=edges)
        resid = tv_masses(estimate.masses, masses)
        history.append(StationaryIterationRow(iteration=it, residual_tv=resid,
                                              value=sol.value, gamma_hat=estimate.gamma_hat))
        masses = estimate.masses
        if resid < tol:
            converged = True
            break
    return StationaryReport(edges=edges, masses=masses,
                            interaction=Marginal(cts.reshape(-1, 1), masses),
                            policy=policy, estimate=estimate, value=sol.value,
                            certificate=cert, drift_report=drift_rep, converged=converged,
                            iterations=len(history), history=history)


def tv_noise_band(masses: np.ndarray, n_paths: int, n_boot: int = 64, seed: int = 5) -> float:
    """Expected TV between the true law and an n-sample histogram of it,
    plus 3 sigma: the measurement floor for invariance checks."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    p = masses / masses.sum()
    tvs = [tv_masses(gen.multinomial(n_paths, p) / n_paths, p) for _ in range(n_boot)]
    return float(np.mean(tvs) + 3.0 * np.std(tvs))


@dataclass(eq=False)
class InvariantReport:
    """Stationary solution re-run from its own law, with the drift-of-TV
    trace that certifies (at histogram resolution) time-invariance."""

    stationary: StationaryReport
    trace: list[tuple[float, float]]   # (t, tv of marginal_t to the candidate law)
    t_check: float
    max_tv: float
    noise_band: float
    tol: float
    mirror_tv: float
    invariant_ok: bool
    symmetric_ok: bool

    @property
    def flagged(self) -> bool:
        return self.stationary.flagged or not self.invariant_ok

    def trace_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "tv_to_mu"])
            for t, tv in self.trace:
                w.writerow([repr(float(t)), repr(float(tv))])


def solve_invariant_mfg(spec: GameSpec, tol: float = 0.05, t_check: float = 16.0,
                        n_check: int = 40000, dt_check: float = 0.02,
                        mirror_tol: float = 0.03, seed: int = 0,
                        trace_stride: int = 10, stationary_tol: float = 0.02,
                        **stationary_kw) -> InvariantReport:
    """Solve the stationary game, then start the dynamics from the candidate
    law itself and verify its marginal stays put in TV over [0, t_check].

    ``tol`` bounds the invariance trace; the outer stationary loop stops at
    ``stationary_tol`` (its own ``tol`` is shadowed here by the former).
    """
    stat = solve_stationary_mfg(spec, tol=stationary_tol, seed=seed, **stationary_kw)
    x0 = sample_from_masses(stat.edges, stat.masses, n_check, seed + 31)
    res = _simulate_flow(spec, stat.interaction, stat.policy, x0, t_check, dt_check,
                         seed + 32, stat.edges, trace_ref=stat.masses, trace_stride=trace_stride)
    trace = res["trace"]
    max_tv = max(tv for _, tv in trace)
    band = tv_noise_band(stat.masses, n_check)
    mirror = tv_masses(stat.masses, stat.masses[::-1])
    return InvariantReport(stationary=stat, trace=trace, t_check=t_check, max_tv=max_tv,
                           noise_band=band, tol=tol, mirror_tv=mirror,
                           invariant_ok=max_tv < tol + band, symmetric_ok=mirror < mirror_tol)


# ---------------------------------------------------------------------------
# Doeblin sphere-hitting chain


@dataclass(frozen=True)
class DoeblinReport:
    theta_hat: float                 # histogram-overlap minorization estimate
    exit_up_from_plus: float         # P(exit at +R | start +R')
    exit_up_from_minus: float
    mean_leg: float                  # mean inner-to-outer travel time
    n_legs: int
    xi: float                        # closed-form lower bound on the mean leg
    leg_ok: bool
    flagged: bool


def doeblin_chain_diagnostic(spec: GameSpec, interaction: Marginal, policy=None,
                             n_chains: int = 4096, dt: float = 0.005,
                             t_budget: float = 60.0, seed: int = 0) -> DoeblinReport:
    """Simulate the inner/outer sphere-hitting chain and measure (a) the
    overlap of exit-side distributions from the two inner starts, a
    constructive stand-in for the minorization constant, and (b) the mean
    inner-to-outer leg, which must beat the closed-form bound xi.
    """
    st = spec.stationary
    if st is None or spec.dim != 1:
        raise StationaryError("the hitting chain diagnostic is scalar-state only")
    if policy is None:
        policy = _zero_policy(spec)
    n = n_chains
    x = np.where(np.arange(n) % 2 == 0, st.r_inner, -st.r_inner).astype(float)
    start_sign = np.sign(x).astype(int)
    outbound = np.ones(n, dtype=bool)  # True: traveling inner -> outer
    leg_start = np.zeros(n)
    first_exit_up = np.full(n, -1, dtype=np.int8)
    legs: list[float] = []
    sqdt = math.sqrt(dt)
    k_steps = int(round(t_budget / dt))
    for k in range(1, k_steps + 1):
        a = policy(x)
        pbuf = x.reshape(n, 1, 1)
        b = np.asarray(spec.drift(0.0, 0, pbuf, interaction, a), dtype=float).reshape(n, -1)[:, 0]
        vol = np.asarray(spec.vol(0.0, 0, pbuf), dtype=float)
        sig = float(vol) if vol.ndim == 0 else np.atleast_1d(vol).reshape(-1)
        x = x + b * dt + sig * step_generator(seed, k, lane=10).standard_normal(n) * sqdt
        t_now = k * dt
        hit_out = outbound & (np.abs(x) >= st.r_outer)
        if hit_out.any():
            legs.extend((t_now - leg_start[hit_out]).tolist())
            fresh = hit_out & (first_exit_up < 0)
            first_exit_up[fresh] = (x[fresh] > 0).astype(np.int8)
            outbound[hit_out] = False
        hit_in = (~outbound) & (np.abs(x) <= st.r_inner)
        if hit_in.any():
            leg_start[hit_in] = t_now
            outbound[hit_in] = True
    plus = first_exit_up[(start_sign > 0) & (first_exit_up >= 0)]
    minus = first_exit_up[(start_sign < 0) & (first_exit_up >= 0)]
    flagged = len(legs) == 0 or len(plus) == 0 or len(minus) == 0
    if flagged:
        return DoeblinReport(0.0, math.nan, math.nan, math.nan, 0,
                             cycle_lower_bound(spec), False, True)
    p_up_plus = float(plus.mean())
    p_up_minus = float(minus.mean())
    theta = min(p_up_plus, p_up_minus) + min(1.0 - p_up_plus, 1.0 - p_up_minus)
    mean_leg = float(np.mean(legs))
    xi = cycle_lower_bound(spec)
    return DoeblinReport(theta_hat=theta, exit_up_from_plus=p_up_plus,
                         exit_up_from_minus=p_up_minus, mean_leg=mean_leg,
                         n_legs=len(legs), xi=xi, leg_ok=mean_leg >= xi, flagged=False)
