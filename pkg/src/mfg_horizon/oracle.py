"""Brute-force reference solutions for the solver test bed.

Everything in this module is deliberately independent of the engine code:
tiny binomial-noise games are solved by exhaustive enumeration over feedback
policies and scenario trees, and one-dimensional stationary densities come
from direct quadrature of the closed-form expression. Tests pin engine
output against these references, so nothing here may import from the
solver modules.

Shared valuation convention (the engine implements the same one): with
discount rate lam and uniform step dt, step k carries the discount factor
gamma^k with gamma = exp(-lam*dt) and the exact-exponential step weight
w = (1 - gamma)/lam, and measure changes use Doleans-Dade increments
exp(beta*dW - beta^2*dt/2).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

Atoms = tuple[tuple[float, float], ...]

MAX_POLICY_SCENARIO_PAIRS = 1_000_000


class OracleError(ValueError):
    """Raised when an instance falls outside the enumerable regime."""


@dataclass(frozen=True)
class DiscreteGameDef:
    """Scalar description of a tiny game driven by binomial (+-sqrt(dt)) noise.

    Coefficients are plain scalar callables so the enumerator shares no code
    with the vectorized engine. ``drift`` and ``reward`` receive the state
    law ``mu`` and the control law ``q`` as tuples of (point, mass) pairs;
    the mass vectors are normalized.
    """

    n_steps: int
    dt: float
    lam: float
    actions: tuple[float, ...]
    x0: float
    drift: Callable[[float, float, Atoms, float], float]
    sigma: Callable[[float, float], float]
    reward: Callable[[float, float, Atoms, Atoms, float], float]
    reward_bound: float

    def __post_init__(self) -> None:
        if self.n_steps < 1 or self.n_steps > 3:
            raise OracleError(f"n_steps must be in 1..3, got {self.n_steps}")
        if len(self.actions) < 1 or len(self.actions) > 3:
            raise OracleError(f"need 1..3 actions, got {len(self.actions)}")
        if self.dt <= 0 or self.lam <= 0:
            raise OracleError("dt and lam must be positive")


@dataclass(frozen=True)
class DiscreteMfgSolution:
    """Exact equilibrium of a tiny discrete game.

    ``policy_slots`` lists one action index per decision slot; slot
    ``2**k - 1 + node`` decides step k at the tree node whose first k
    increment signs encode ``node`` bitwise (bit j set = up-move at step j).
    ``marginals``/``control_laws`` are normalized atom tuples per step,
    weighted at that step's horizon. ``value`` is the reward of the
    equilibrium policy under its own flow, full-horizon weighted.
    """

    value: float
    policy_slots: tuple[int, ...]
    marginals: tuple[Atoms, ...]
    control_laws: tuple[Atoms, ...]
    scenario_states: np.ndarray
    scenario_weights: np.ndarray
    policy_scenario_actions: np.ndarray
    n_policies: int
    n_equilibria: int
    dp_value: float
    dp_agrees: bool


def _tree_geometry(game: DiscreteGameDef):
    """Scenario states, increments and the (step, scenario) -> slot map."""
    K = game.n_steps
    n_scen = 2**K
    sqdt = math.sqrt(game.dt)
    eps = np.array([[1.0 if (s >> k) & 1 else -1.0 for k in range(K)] for s in range(n_scen)])
    dw = eps * sqdt
    times = np.arange(K + 1) * game.dt
    x = np.zeros((n_scen, K + 1))
    x[:, 0] = game.x0
    for k in range(K):
        for s in range(n_scen):
            x[s, k + 1] = x[s, k] + game.sigma(times[k], x[s, k]) * dw[s, k]
    # scenarios sharing their first k increment bits sit at the same node
    slot_map = np.array([[(2**k - 1) + (s & ((1 << k) - 1)) for s in range(n_scen)] for k in range(K)])
    return times, x, dw, slot_map


def _all_policies(game: DiscreteGameDef) -> np.ndarray:
    K = game.n_steps
    n_slots = 2**K - 1
    n_act = len(game.actions)
    n_pol = n_act**n_slots
    if n_pol * (2**K) > MAX_POLICY_SCENARIO_PAIRS:
        raise OracleError(f"policy x scenario budget exceeded: {n_pol * 2 ** K}")
    # lexicographic order, slot 0 most significant: first argmax = smallest slot indices
    return np.array(list(itertools.product(range(n_act), repeat=n_slots)), dtype=np.int64)


def _atoms(points: np.ndarray, masses: np.ndarray) -> Atoms:
    """Normalized (point, mass) pairs with coincident points merged, sorted
    by point; coincidence is exact up to 1e-12 rounding (tree states are
    sums of identical increments, so equal nodes match bitwise anyway)."""
    total = float(masses.sum())
    merged: dict[float, float] = {}
    for p, m in zip(points, masses):
        key = round(float(p), 12)
        merged[key] = merged.get(key, 0.0) + float(m) / total
    return tuple(sorted(merged.items()))


def _induce_flow(game: DiscreteGameDef, scen_actions: np.ndarray):
    """Forward flow of one policy: per-step normalized marginals, control laws,
    and the cumulative Doleans-Dade weights (shape (K+1, n_scen))."""
    times, x, dw, _ = _tree_geometry(game)
    K = game.n_steps
    n_scen = x.shape[0]
    w = np.ones((K + 1, n_scen))
    marginals: list[Atoms] = []
    qlaws: list[Atoms] = []
    for k in range(K):
        mu_k = _atoms(x[:, k], w[k])
        marginals.append(mu_k)
        acts = np.array([game.actions[scen_actions[k, s]] for s in range(n_scen)])
        q_mass = {}
        wn = w[k] / w[k].sum()
        for s in range(n_scen):
            q_mass[acts[s]] = q_mass.get(acts[s], 0.0) + wn[s]
        qlaws.append(tuple(sorted(q_mass.items())))
        for s in range(n_scen):
            beta = game.drift(times[k], x[s, k], mu_k, acts[s]) / game.sigma(times[k], x[s, k])
            w[k + 1, s] = w[k, s] * math.exp(beta * dw[s, k] - 0.5 * beta * beta * game.dt)
    marginals.append(_atoms(x[:, K], w[K]))
    return tuple(marginals), tuple(qlaws), w


def _coefficient_tables(game: DiscreteGameDef, marginals, qlaws):
    """F[k, s, j] and BETA[k, s, j] on the scenario tree under a fixed flow."""
    times, x, _, _ = _tree_geometry(game)
    K = game.n_steps
    n_scen = x.shape[0]
    n_act = len(game.actions)
    F = np.empty((K, n_scen, n_act))
    B = np.empty((K, n_scen, n_act))
    for k in range(K):
        for s in range(n_scen):
            for j, a in enumerate(game.actions):
                F[k, s, j] = game.reward(times[k], x[s, k], marginals[k], qlaws[k], a)
                B[k, s, j] = game.drift(times[k], x[s, k], marginals[k], a) / game.sigma(times[k], x[s, k])
    return F, B


def _all_policy_rewards(game: DiscreteGameDef, pol_actions: np.ndarray, F: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Self-normalized horizon-weighted reward of every policy under one flow.

    Normalizing by the mean weight makes the reweighting a probability
    measure on scenarios even though the exponential increments are not
    mean-one under binomial noise; in particular drift-independent rewards
    tie exactly across policies.
    """
    _, _, dw, _ = _tree_geometry(game)
    K = game.n_steps
    gamma = math.exp(-game.lam * game.dt)
    wstep = (1.0 - gamma) / game.lam
    disc = gamma ** np.arange(K)
    k_ix = np.arange(K)[:, None]
    s_ix = np.arange(F.shape[1])[None, :]
    Fg = F[k_ix, s_ix, pol_actions]  # (n_pol, K, n_scen) via broadcast gather
    Bg = B[k_ix, s_ix, pol_actions]
    w = np.exp((Bg * dw.T[None] - 0.5 * Bg * Bg * game.dt).sum(axis=1))
    rew = (disc[None, :, None] * wstep * Fg).sum(axis=1)
    return (w * rew).mean(axis=1) / w.mean(axis=1)


def backward_induction(game: DiscreteGameDef, marginals, qlaws, policy_slots=None):
    """Dynamic program on the scenario tree under a frozen flow.

    Returns (value at the root, greedy slot actions, node value table). With
    ``policy_slots`` given, evaluates that policy instead of maximizing.
    Ties go to the smallest action index.
    """
    times, _, _, _ = _tree_geometry(game)
    K = game.n_steps
    gamma = math.exp(-game.lam * game.dt)
    wstep = (1.0 - gamma) / game.lam
    sqdt = math.sqrt(game.dt)

    # node states level by level; child of (k, node) under bit b is node | b << k
    xs: list[list[float]] = [[game.x0]]
    for k in range(K):
        prev = xs[k]
        nxt = [0.0] * (2 ** (k + 1))
        for node, xv in enumerate(prev):
            sig = game.sigma(times[k], xv)
            nxt[node] = xv - sig * sqdt
            nxt[node | (1 << k)] = xv + sig * sqdt
        xs.append(nxt)

    values = [0.0] * (2**K)
    tables = [list(values)]
    greedy: list[int] = [0] * (2**K - 1)
    for k in range(K - 1, -1, -1):
        level = [0.0] * (2**k)
        for node, xv in enumerate(xs[k]):
            y_dn = values[node]
            y_up = values[node | (1 << k)]
            cond_y = 0.5 * (y_up + y_dn)
            ztil = gamma * (y_up - y_dn) / (2.0 * sqdt)
            sig = game.sigma(times[k], xv)
            best_v, best_j = -math.inf, 0
            for j, a in enumerate(game.actions):
                f = game.reward(times[k], xv, marginals[k], qlaws[k], a)
                beta = game.drift(times[k], xv, marginals[k], a) / sig
                hv = f + ztil * beta
                if hv > best_v:
                    best_v, best_j = hv, j
            if policy_slots is not None:
                best_j = policy_slots[(2**k - 1) + node]
                a = game.actions[best_j]
                f = game.reward(times[k], xv, marginals[k], qlaws[k], a)
                beta = game.drift(times[k], xv, marginals[k], a) / sig
                best_v = f + ztil * beta
            greedy[(2**k - 1) + node] = best_j
            level[node] = gamma * cond_y + wstep * best_v
            if abs(level[node]) > game.reward_bound / game.lam + 1e-9:
                raise OracleError("tree value escaped the reward/lam bound")
        values = level
        tables.append(list(level))
    tables.reverse()
    return values[0], tuple(greedy), tables


def enumerate_discrete_mfg(game: DiscreteGameDef) -> DiscreteMfgSolution:
    """Exact equilibrium by exhaustive search.

    Scans every feedback policy as the population policy, induces its flow,
    and keeps the policies that best-respond to their own flow (reward scan
    over all policies, ties to the lexicographically smallest). Deterministic;
    raises if no fixed point exists in the finite policy set.
    """
    pols = _all_policies(game)
    _, _, _, slot_map = _tree_geometry(game)
    pol_actions = pols[:, slot_map]  # (n_pol, K, n_scen)

    equilibria = []
    for p in range(pols.shape[0]):
        marginals, qlaws, _ = _induce_flow(game, pol_actions[p])
        F, B = _coefficient_tables(game, marginals, qlaws)
        rewards = _all_policy_rewards(game, pol_actions, F, B)
        # exact-arithmetic ties drift apart by a few ulps (the weighted sums
        # round differently per policy); collapse them before tie-breaking
        top = float(rewards.max())
        tol = 64.0 * np.finfo(float).eps * max(1.0, abs(top))
        if int(np.flatnonzero(rewards >= top - tol)[0]) == p:
            equilibria.append((p, float(rewards[p]), marginals, qlaws))
    if not equilibria:
        raise OracleError("no equilibrium in the finite policy set")

    p, value, marginals, qlaws = equilibria[0]
    dp_value, dp_greedy, _ = backward_induction(game, marginals, qlaws)
    return DiscreteMfgSolution(
        value=value,
        policy_slots=tuple(int(a) for a in pols[p]),
        marginals=marginals,
        control_laws=qlaws,
        scenario_states=_tree_geometry(game)[1],
        scenario_weights=_induce_flow(game, pol_actions[p])[2],
        policy_scenario_actions=pol_actions[p].copy(),
        n_policies=pols.shape[0],
        n_equilibria=len(equilibria),
        dp_value=dp_value,
        dp_agrees=dp_greedy == tuple(int(a) for a in pols[p]),
    )


# ---------------------------------------------------------------------------
# stationary density quadrature


class NonIntegrableDriftError(ValueError):
    """The scale density exp(2 * int b) does not normalize."""


@dataclass(frozen=True)
class StationaryDensity:
    """Normalized 1-D stationary density on a uniform grid (unit volatility)."""

    grid: np.ndarray
    density: np.ndarray
    mean: float
    second_moment: float

    @property
    def variance(self) -> float:
        return self.second_moment - self.mean**2

    def cdf(self) -> np.ndarray:
        h = self.grid[1] - self.grid[0]
        c = np.concatenate([[0.0], np.cumsum((self.density[1:] + self.density[:-1]) * 0.5 * h)])
        return c / c[-1]

    def binned_masses(self, edges: np.ndarray) -> np.ndarray:
        cdf = self.cdf()
        at = np.interp(edges, self.grid, cdf, left=0.0, right=1.0)
        return np.diff(at)


def _density_on_grid(drift: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, n: int):
    grid = np.linspace(lo, hi, n)
    b = np.asarray(drift(grid), dtype=float)
    if b.shape != grid.shape:
        raise OracleError("drift callable must be vectorized over the grid")
    h = grid[1] - grid[0]
    # log density = 2 * int_0^x b, anchored so the value at x=0 is zero
    # (b[i] + b[i+1]) * h is twice the trapezoid panel, i.e. exactly 2 * int b
    logd = np.concatenate([[0.0], np.cumsum((b[1:] + b[:-1]) * h)])
    logd -= np.interp(0.0, grid, logd)
    return grid, logd


def stationary_density_quadrature(
    drift: Callable[[np.ndarray], np.ndarray],
    lo: float = -8.0,
    hi: float = 8.0,
    n0: int = 1025,
    tol: float = 1e-6,
    max_span: float = 512.0,
) -> StationaryDensity:
    """Stationary density of dX = b(X) dt + dW by direct quadrature.

    The density is proportional to exp(2 * int_0^x b). The domain grows until
    the boundary log-density sits 40 nats under the interior peak (otherwise
    the drift is declared non-integrable), then the grid is halved until the
    first two moments move by less than ``tol``.
    """
    lo, hi = float(lo), float(hi)
    while True:
        grid, logd = _density_on_grid(drift, lo, hi, n0)
        peak = logd.max()
        if logd[0] < peak - 40.0 and logd[-1] < peak - 40.0:
            break
        if (hi - lo) > max_span:
            raise NonIntegrableDriftError("scale density does not decay; drift is not positive recurrent")
        width = hi - lo
        if logd[0] >= peak - 40.0:
            lo -= 0.75 * width
        if logd[-1] >= peak - 40.0:
            hi += 0.75 * width

    prev = None
    n = n0
    while True:
        grid, logd = _density_on_grid(drift, lo, hi, n)
        dens = np.exp(logd - logd.max())
        mass = np.trapezoid(dens, grid)
        dens /= mass
        mean = float(np.trapezoid(grid * dens, grid))
        second = float(np.trapezoid(grid * grid * dens, grid))
        if prev is not None and abs(mean - prev[0]) < tol and abs(second - prev[1]) < tol:
            return StationaryDensity(grid=grid, density=dens, mean=mean, second_moment=second)
        prev = (mean, second)
        n = 2 * n - 1
        if n > 2**22:
            raise OracleError("quadrature did not stabilize")
