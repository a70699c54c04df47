"""Mean field equilibrium as a fixed point of the best-response flow map.

A candidate population is a pair (state-marginal flow, action-law flow)
carried as measure weights plus per-step action masses over one frozen
ensemble. The map solves the backward equation in that environment,
extracts the maximizer, and pushes the ensemble through its weights. Picard
iteration is damped by mixing weight flows (mixtures of densities are
densities, so everything downstream keeps working), with the step halved
whenever the residual fails to shrink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bsde import BsdeSolution, TruncationCertificate, required_steps, solve_finite_horizon
from .control import ControlField, RewardEstimate, control_weights, evaluate_reward, extract_optimal_control
from .games import ActionLaw, GameSpec, Marginal
from .metrics import tv_binned, w1_actions
from .paths import MeasureWeights, PathEnsemble, mix_weights, unit_weights


@dataclass(eq=False)
class MeanFieldState:
    """Population environment over a shared ensemble: weight flow for the
    state marginals plus per-step action-law masses."""

    ensemble: PathEnsemble
    weights: MeasureWeights
    q_masses: np.ndarray       # (k_t, n_actions)
    action_atoms: np.ndarray   # (n_actions, d_a)
    control: ControlField | None = None
    value: float | None = None

    def __post_init__(self) -> None:
        self._marginal_cache: dict[int, Marginal] = {}

    @property
    def k_t(self) -> int:
        return self.weights.k_horizon

    def marginal(self, k: int) -> Marginal:
        m = self._marginal_cache.get(k)
        if m is None:
            m = Marginal(self.ensemble.states[:, k], self.weights.weights(k))
            self._marginal_cache[k] = m
        return m

    def qlaw(self, k: int) -> ActionLaw:
        return ActionLaw(self.action_atoms, self.q_masses[k])

    def restrict(self, k_t: int) -> "MeanFieldState":
        return MeanFieldState(
            ensemble=self.ensemble, weights=self.weights.project(k_t),
            q_masses=self.q_masses[:k_t], action_atoms=self.action_atoms,
            control=None if self.control is None else self.control.restrict(k_t),
            value=None,
        )

    @classmethod
    def driftless(cls, spec: GameSpec, ensemble: PathEnsemble, k_t: int) -> "MeanFieldState":
        """Reference-measure start: unit weights, uniform action law."""
        n_a = spec.actions.n_atoms
        return cls(ensemble=ensemble, weights=unit_weights(ensemble, k_t),
                   q_masses=np.full((k_t, n_a), 1.0 / n_a), action_atoms=spec.actions.atoms.copy())

    @classmethod
    def tilted(cls, spec: GameSpec, ensemble: PathEnsemble, k_t: int,
               action_index: int | None = None) -> "MeanFieldState":
        """Far-from-equilibrium start: the constant control at one grid atom
        (largest-norm atom by default) and its point action law."""
        if action_index is None:
            action_index = int(np.argmax((spec.actions.atoms**2).sum(axis=1)))
        ctl = ControlField(indices=np.full((ensemble.n_paths, k_t), action_index, dtype=np.int16),
                           atoms=spec.actions.atoms.copy())
        state = cls.driftless(spec, ensemble, k_t)
        w = control_weights(spec, ensemble, state.marginal, ctl, k_t)
        q = np.zeros((k_t, spec.actions.n_atoms))
        q[:, action_index] = 1.0
        return cls(ensemble=ensemble, weights=w, q_masses=q,
                   action_atoms=spec.actions.atoms.copy(), control=ctl)


@dataclass(frozen=True)
class FixedPointDiag:
    solution: BsdeSolution
    weight_mean: float


def fixed_point_map(spec: GameSpec, state: MeanFieldState, conditioning: str = "poly",
                    degree: int = 3, reg_bins: int = 32) -> tuple[MeanFieldState, FixedPointDiag]:
    """One best-response step: solve backward in the state's environment,
    induce the maximizer's measure and action flow."""
    ens = state.ensemble
    sol = solve_finite_horizon(spec, ens, state.marginal, state.qlaw, state.k_t,
                               conditioning=conditioning, degree=degree, bins=reg_bins)
    ctl = extract_optimal_control(spec, sol)
    w = control_weights(spec, ens, state.marginal, ctl, state.k_t)
    n_a = spec.actions.n_atoms
    q = np.empty((state.k_t, n_a))
    for k in range(state.k_t):
        q[k] = np.bincount(ctl.indices[:, k], weights=w.normalized(k), minlength=n_a)
    new = MeanFieldState(ensemble=ens, weights=w, q_masses=q,
                         action_atoms=spec.actions.atoms.copy(), control=ctl, value=sol.value)
    return new, FixedPointDiag(solution=sol, weight_mean=float(w.weights().mean()))


def flow_residual(a: MeanFieldState, b: MeanFieldState, bins: int = 64,
                  stride: int = 1) -> tuple[float, float]:
    """(sup-t TV of state marginals, sup-t W1 of action laws), on shared bins."""
    k_t = min(a.k_t, b.k_t)
    tv = 0.0
    for k in range(0, k_t + 1, stride):
        tv = max(tv, tv_binned(a.marginal(k), b.marginal(k), bins))
    w1 = 0.0
    for k in range(0, k_t, stride):
        w1 = max(w1, w1_actions(a.qlaw(k), b.qlaw(k)))
    return tv, w1


def mix_states(old: MeanFieldState, new: MeanFieldState, theta: float) -> MeanFieldState:
    """Damped update (1-theta) old + theta new, entrywise on both flows."""
    return MeanFieldState(
        ensemble=old.ensemble,
        weights=mix_weights(old.weights, new.weights, theta),
        q_masses=(1.0 - theta) * old.q_masses + theta * new.q_masses,
        action_atoms=old.action_atoms,
    )


@dataclass
class IterationRow:
    iteration: int
    tv: float
    w1: float
    residual: float
    value: float
    theta: float


@dataclass(eq=False)
class EquilibriumReport:
    """Converged (or flagged) equilibrium: the pure best-response state, its
    backward solution, and the iteration trace."""

    state: MeanFieldState
    control: ControlField
    solution: BsdeSolution
    certificate: TruncationCertificate | None
    value: float
    converged: bool
    iterations: int
    final_residual: float
    history: list[IterationRow]
    fixed_point_residual: float | None  # residual of one extra map at the answer
    tol_fp: float

    @property
    def flagged(self) -> bool:
        if not self.converged:
            return True
        if self.fixed_point_residual is None:
            return False
        return self.fixed_point_residual > 2.0 * self.tol_fp


def solve_equilibrium(spec: GameSpec, ensemble: PathEnsemble, tol: float | None = None,
                      k_t: int | None = None, tol_fp: float = 5e-3, theta: float = 0.5,
                      max_iter: int = 40, bins: int = 64, conditioning: str = "poly",
                      degree: int = 3, reg_bins: int = 32, init: str | MeanFieldState = "driftless",
                      verify: bool = True, stride: int = 1) -> EquilibriumReport:
    """Damped Picard iteration on the best-response map.

    Exactly one of `tol` (infinite horizon, certified truncation) or `k_t`
    (finite horizon) fixes the grid horizon. The residual is sup-t TV of the
    marginal flows plus sup-t W1 of the action flows between input and
    best response; theta halves whenever it increases. The reported state is
    the pure best response at the last iterate, and when `verify` is set one
    extra map evaluation at the answer records its own residual.
    """
    if (tol is None) == (k_t is None):
        raise ValueError("specify exactly one of tol or k_t")
    certificate = None
    if tol is not None:
        k_t = required_steps(spec, ensemble.dt, tol)
        if k_t > ensemble.n_steps:
            raise ValueError(f"ensemble too short: need {k_t} steps for tol={tol}")
        t_used = k_t * ensemble.dt
        certificate = TruncationCertificate(
            t_used=t_used, k_used=k_t, tol_requested=tol,
            tail_bound=spec.bounds.value_bound(spec.lam) * math.exp(-spec.lam * t_used))
    if isinstance(init, MeanFieldState):
        s = init
    elif init == "driftless":
        s = MeanFieldState.driftless(spec, ensemble, k_t)
    elif init == "tilted":
        s = MeanFieldState.tilted(spec, ensemble, k_t)
    else:
        raise ValueError(f"unknown init {init!r}")
    opts = dict(conditioning=conditioning, degree=degree, reg_bins=reg_bins)
    history: list[IterationRow] = []
    best_resid = math.inf
    converged = False
    phi, diag = fixed_point_map(spec, s, **opts)
    for it in range(1, max_iter + 1):
        tv, w1 = flow_residual(phi, s, bins=bins, stride=stride)
        resid = tv + w1
        history.append(IterationRow(iteration=it, tv=tv, w1=w1, residual=resid,
                                    value=diag.solution.value, theta=theta))
        if resid < tol_fp:
            converged = True
            break
        if resid > best_resid and theta > 1.0 / 64.0:
            theta *= 0.5
        best_resid = min(best_resid, resid)
        s = mix_states(s, phi, theta)
        phi, diag = fixed_point_map(spec, s, **opts)
    fp_resid = None
    if verify:
        phi2, _ = fixed_point_map(spec, phi, **opts)
        tv2, w12 = flow_residual(phi2, phi, bins=bins, stride=stride)
        fp_resid = tv2 + w12
    return EquilibriumReport(
        state=phi, control=phi.control, solution=diag.solution, certificate=certificate,
        value=diag.solution.value, converged=converged, iterations=len(history),
        final_residual=history[-1].residual, history=history,
        fixed_point_residual=fp_resid, tol_fp=tol_fp,
    )


@dataclass(frozen=True)
class GapEstimate:
    """Optimality and fixed-point defects of a candidate equilibrium."""

    value: float
    reward: RewardEstimate
    gap: float          # value - reward of the candidate's own control
    residual_tv: float
    residual_w1: float


def equilibrium_gap(spec: GameSpec, state: MeanFieldState, conditioning: str = "poly",
                    degree: int = 3, reg_bins: int = 32, bins: int = 64,
                    seed: int = 0) -> GapEstimate:
    """Re-derive the defects of a state that claims to be an equilibrium:
    optimality gap V - J of its control in its own environment, and the
    residual of one more best-response map."""
    if state.control is None:
        raise ValueError("state carries no control; run the fixed-point map first")
    phi, diag = fixed_point_map(spec, state, conditioning=conditioning,
                                degree=degree, reg_bins=reg_bins)
    tv, w1 = flow_residual(phi, state, bins=bins)
    rew = evaluate_reward(spec, state.ensemble, state.marginal, state.qlaw,
                          state.control, k_t=state.k_t, weights=state.weights, seed=seed)
    return GapEstimate(value=diag.solution.value, reward=rew,
                       gap=diag.solution.value - rew.value, residual_tv=tv, residual_w1=w1)
