"""Controls over the frozen ensemble and their reward functionals.

A control here is simply the (path, step) table of grid actions; the
measure it induces lives in the Doleans-Dade weights built from its drift.
Rewards are integrated with the same exact-exponential quadrature the
backward solver uses, so value and reward estimates share a convention and
their gap is a meaningful optimality defect rather than a scheme artifact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .bsde import BsdeSolution, MarginalAt, QLawAt, solve_infinite_horizon
from .games import GameSpec
from .metrics import bootstrap_band
from .paths import MeasureWeights, PathEnsemble, girsanov_weights


@dataclass(frozen=True, eq=False)
class ControlField:
    """Grid-action choice per (path, step)."""

    indices: np.ndarray  # (N, K) int
    atoms: np.ndarray    # (n_actions, d_a)

    def __post_init__(self) -> None:
        self.indices.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.indices.shape[1]

    def actions(self, k: int) -> np.ndarray:
        return self.atoms[self.indices[:, k]]

    def restrict(self, k_t: int) -> "ControlField":
        return ControlField(self.indices[:, :k_t], self.atoms)


def extract_optimal_control(spec: GameSpec, solution: BsdeSolution) -> ControlField:
    """The pointwise maximizer the backward pass committed to."""
    return ControlField(indices=solution.argmax_idx.copy(), atoms=spec.actions.atoms.copy())


def constant_control(spec: GameSpec, ensemble: PathEnsemble, action_index: int,
                     k_t: int | None = None) -> ControlField:
    k_t = ensemble.n_steps if k_t is None else k_t
    idx = np.full((ensemble.n_paths, k_t), action_index, dtype=np.int16)
    return ControlField(indices=idx, atoms=spec.actions.atoms.copy())


def drift_field(spec: GameSpec, ensemble: PathEnsemble, marginal_at: MarginalAt,
                control: ControlField, k_t: int | None = None) -> np.ndarray:
    """Vol-inverted drift beta[i, k] realized by the control along the paths."""
    k_t = control.n_steps if k_t is None else k_t
    beta = np.empty((ensemble.n_paths, k_t, ensemble.dim))
    for k in range(k_t):
        beta[:, k] = spec.drift_over_vol(float(ensemble.times[k]), k, ensemble.states,
                                         marginal_at(k), control.actions(k))
    return beta


def control_weights(spec: GameSpec, ensemble: PathEnsemble, marginal_at: MarginalAt,
                    control: ControlField, k_t: int | None = None) -> MeasureWeights:
    k_t = control.n_steps if k_t is None else k_t
    beta = drift_field(spec, ensemble, marginal_at, control, k_t)
    return girsanov_weights(ensemble, beta, spec.bounds.drift, k_t)


@dataclass(frozen=True)
class RewardEstimate:
    """Discounted reward of a control in a fixed population environment."""

    value: float
    band: float   # 3-sigma path-bootstrap band
    ess: float
    k_t: int


def discounted_reward_paths(spec: GameSpec, ensemble: PathEnsemble, marginal_at: MarginalAt,
                            qlaw_at: QLawAt | None, control: ControlField,
                            k_t: int | None = None) -> np.ndarray:
    """Per-path discounted reward sums (no reweighting); same exact
    quadrature as the backward solver."""
    k_t = control.n_steps if k_t is None else k_t
    dt = ensemble.dt
    gamma = math.exp(-spec.lam * dt)
    wstep = (1.0 - gamma) / spec.lam
    total = np.zeros(ensemble.n_paths)
    disc = wstep
    for k in range(k_t):
        t_k = float(ensemble.times[k])
        mu_k = marginal_at(k)
        a_k = control.actions(k)
        f_k = np.asarray(spec.reward_state(t_k, k, ensemble.states, mu_k), dtype=float) \
            + np.asarray(spec.reward_action(t_k, k, ensemble.states, a_k), dtype=float)
        if spec.reward_mix is not None and qlaw_at is not None:
            q_k = qlaw_at(k)
            if q_k is not None:
                f_k = f_k + float(spec.reward_mix(t_k, mu_k, q_k))
        total += disc * f_k
        disc *= gamma
    return total


def evaluate_reward(spec: GameSpec, ensemble: PathEnsemble, marginal_at: MarginalAt,
                    qlaw_at: QLawAt | None, control: ControlField, k_t: int | None = None,
                    weights: MeasureWeights | None = None, seed: int = 0,
                    n_boot: int = 200) -> RewardEstimate:
    """Reweighted Monte Carlo of the truncated discounted reward.

    One weight per path at the full horizon k_t multiplies the whole
    discounted reward sum: the integrand is F_{k_t}-measurable, so this is
    the exact change of measure, and shared paths across candidate controls
    give common-random-number cancellation in comparisons.
    """
    k_t = control.n_steps if k_t is None else k_t
    if weights is None:
        weights = control_weights(spec, ensemble, marginal_at, control, k_t)
    total = discounted_reward_paths(spec, ensemble, marginal_at, qlaw_at, control, k_t)
    w = weights.weights(k_t)
    value = float((w * total).mean() / w.mean())
    band = bootstrap_band(total, weights=w, n_boot=n_boot, seed=seed)
    return RewardEstimate(value=value, band=band, ess=weights.ess(k_t), k_t=k_t)


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    band: float
    certificate: object
    solution: BsdeSolution


def value(spec: GameSpec, ensemble: PathEnsemble, marginal_at: MarginalAt,
          qlaw_at: QLawAt | None, tol: float, split_band: bool = True,
          **solve_kw) -> ValueEstimate:
    """Certified value estimate; the band is a split-half regression band
    (3 sigma), honest about Monte Carlo plus projection noise."""
    sol, cert = solve_infinite_horizon(spec, ensemble, marginal_at, qlaw_at, tol, **solve_kw)
    band = 0.0
    if split_band:
        halves = []
        for par in (0, 1):
            sub = PathEnsemble(ensemble.states[par::2], ensemble.increments[par::2],
                               ensemble.times, ensemble.seed, ensemble.noise)
            hsol, _ = solve_infinite_horizon(spec, sub, marginal_at, qlaw_at, tol, **solve_kw)
            halves.append(hsol.value)
        band = 1.5 * abs(halves[0] - halves[1])
    return ValueEstimate(value=sol.value, band=band, certificate=cert, solution=sol)


# ---------------------------------------------------------------------------
# Markov feedback fit


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """Piecewise-constant state feedback on equal-mass bins (scalar states).

    Out-of-range states clip to the edge bins; actions snap to the grid.
    """

    edges: np.ndarray    # (B + 1,)
    actions: np.ndarray  # (B, d_a)
    disagreement: float  # weighted share of samples off the fitted action
    spread_flags: np.ndarray  # (B,) bins whose action spread exceeds the grid spacing

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        idx = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, len(self.actions) - 1)
        return self.actions[idx]

    @property
    def non_markov_share(self) -> float:
        return float(self.spread_flags.mean())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d_a = self.actions.shape[1]
            w.writerow(["bin_lo", "bin_hi"] + [f"a{j}" for j in range(d_a)] + ["spread_flag"])
            for b in range(len(self.actions)):
                w.writerow([repr(float(self.edges[b])), repr(float(self.edges[b + 1]))]
                           + [repr(float(v)) for v in self.actions[b]] + [int(self.spread_flags[b])])

    @classmethod
    def from_csv(cls, path) -> "FeedbackPolicy":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        d_a = len(rows[0]) - 3
        edges = np.array([float(r[0]) for r in body] + [float(body[-1][1])])
        actions = np.array([[float(v) for v in r[2:2 + d_a]] for r in body])
        flags = np.array([bool(int(r[-1])) for r in body])
        return cls(edges=edges, actions=actions, disagreement=float("nan"), spread_flags=flags)


def fit_feedback(spec: GameSpec, ensemble: PathEnsemble, control: ControlField,
                 weights: MeasureWeights | None = None, bins: int = 64,
                 k_max: int | None = None, snap: bool = True) -> FeedbackPolicy:
    """Project an open-loop control table onto a stationary state feedback.

    Pools (state, action) pairs over steps up to k_max (defaults to the full
    table; pass roughly half the truncation horizon for stationary use, where
    the late-time table is dominated by the terminal condition), weighting
    each sample by its path's measure weight at that step. The weighted mean
    action per bin snaps to the nearest grid atom so the policy stays
    admissible. Bins whose weighted action spread exceeds the grid spacing
    are flagged: a genuinely Markov control has near-zero spread.
    """
    if ensemble.dim != 1:
        raise ValueError("feedback fitting is implemented for scalar states")
    k_max = control.n_steps if k_max is None else min(k_max, control.n_steps)
    xs = ensemble.states[:, :k_max, 0].reshape(-1)
    acts = control.atoms[control.indices[:, :k_max]].reshape(-1, control.atoms.shape[1])
    if weights is None:
        ws = np.ones(xs.size)
    else:
        ws = weights.w_flow[:, :k_max].reshape(-1)
    from .metrics import equal_mass_edges

    edges = equal_mass_edges(xs, ws / ws.sum(), bins)
    idx = np.clip(np.searchsorted(edges, xs, side="right") - 1, 0, len(edges) - 2)
    n_bins = len(edges) - 1
    wsum = np.bincount(idx, weights=ws, minlength=n_bins)
    mean_a = np.empty((n_bins, acts.shape[1]))
    spread = np.empty(n_bins)
    for j in range(acts.shape[1]):
        mean_a[:, j] = np.bincount(idx, weights=ws * acts[:, j], minlength=n_bins) / np.maximum(wsum, 1e-300)
    dev2 = ((acts - mean_a[idx]) ** 2).sum(axis=1)
    spread = np.sqrt(np.bincount(idx, weights=ws * dev2, minlength=n_bins) / np.maximum(wsum, 1e-300))
    spacing = spec.actions.spacing()
    if snap:
        d2 = ((mean_a[:, None, :] - spec.actions.atoms[None, :, :]) ** 2).sum(axis=2)
        mean_a = spec.actions.atoms[np.argmin(d2, axis=1)]
    fitted = mean_a[idx]
    off = np.sqrt(((acts - fitted) ** 2).sum(axis=1)) > max(spacing / 2.0, 1e-12)
    disagreement = float((ws * off).sum() / ws.sum())
    return FeedbackPolicy(edges=edges, actions=mean_a, disagreement=disagreement,
                          spread_flags=spread > spacing)
