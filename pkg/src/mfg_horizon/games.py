"""Game definitions: coefficients, action sets, declared bounds, Hamiltonian ops.

A game is a bundle of vectorized coefficient callables over a shared path
array plus the constants the solver machinery relies on (drift bound C for
measure changes, reward bound M for value clamping, action-Lipschitz L and
concavity modulus m for the rate checks). Coefficients receive the full
path array together with the step index k and must only read states up to
and including k; `check_standing_assumptions` probes that convention by
perturbing the future.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class GameValidationError(ValueError):
    """A game definition violates a structural precondition."""


# ---------------------------------------------------------------------------
# action sets


@dataclass(frozen=True, eq=False)
class ActionSet:
    """Compact action set with a materialized search grid.

    Intervals carry a uniform grid (cartesian across coordinates); atom sets
    are used as given. The grid order is the tie-break order: maximization
    returns the smallest index among ties.
    """

    atoms: np.ndarray  # (n_atoms, dim)
    kind: str = "atoms"
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self) -> None:
        a = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if a.ndim != 2 or a.shape[0] == 0:
            raise GameValidationError("action grid must be a nonempty (n, dim) array")
        object.__setattr__(self, "atoms", a)
        a.setflags(write=False)

    @classmethod
    def interval(cls, lo, hi, n: int = 41) -> "ActionSet":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo) or n < 2:
            raise GameValidationError("interval needs lo < hi per coordinate and n >= 2")
        axes = [np.linspace(lo[i], hi[i], n) for i in range(lo.size)]
        mesh = np.meshgrid(*axes, indexing="ij")
        grid = np.stack([m.ravel() for m in mesh], axis=1)
        return cls(atoms=grid, kind="interval", lo=lo, hi=hi)

    @classmethod
    def from_atoms(cls, pts) -> "ActionSet":
        return cls(atoms=np.atleast_2d(np.asarray(pts, dtype=float)).reshape(len(pts), -1))

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def with_resolution(self, n: int) -> "ActionSet":
        if self.kind != "interval":
            return self
        return ActionSet.interval(self.lo, self.hi, n)

    def spacing(self) -> float:
        """Largest per-coordinate grid gap; 0 for pure atom sets."""
        if self.n_atoms < 2:
            return 0.0
        gaps = [np.max(np.diff(np.unique(self.atoms[:, i]))) if np.unique(self.atoms[:, i]).size > 1 else 0.0
                for i in range(self.dim)]
        return float(max(gaps))

    def max_norm(self) -> float:
        return float(np.sqrt((self.atoms**2).sum(axis=1)).max())


# ---------------------------------------------------------------------------
# weighted marginals and control laws


class Marginal:
    """Weighted empirical state law at one time point."""

    __slots__ = ("atoms", "weights", "_mean", "_kde")

    def __init__(self, atoms: np.ndarray, weights: np.ndarray | None = None):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        self.atoms = atoms
        n = atoms.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        else:
            weights = np.asarray(weights, dtype=float)
            s = weights.sum()
            if not np.isfinite(s) or s <= 0 or np.any(weights < 0):
                raise GameValidationError("marginal weights must be nonnegative with positive mass")
            weights = weights / s
        self.weights = weights
        self._mean = None
        self._kde = {}

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean = self.weights @ self.atoms
        return self._mean

    def second_moment(self) -> float:
        return float(self.weights @ (self.atoms**2).sum(axis=1))

    def gaussian_kernel_density(self, query: np.ndarray, scale: float, grid_pts: int = 1024) -> np.ndarray:
        """(rho * mu)(query) for rho(u) = exp(-u^2 / (2 scale^2)), 1-D only.

        Linear-binned grid convolution; cached per (scale, grid_pts) since the
        same marginal is queried repeatedly inside one backward pass.
        """
        if self.dim != 1:
            raise GameValidationError("kernel density implemented for 1-D states")
        key = (float(scale), int(grid_pts))
        if key not in self._kde:
            x = self.atoms[:, 0]
            lo = float(x.min()) - 5.0 * scale
            hi = float(x.max()) + 5.0 * scale
            grid = np.linspace(lo, hi, grid_pts)
            h = grid[1] - grid[0]
            # split each atom's mass linearly between its two neighbors
            pos = np.clip((x - lo) / h, 0.0, grid_pts - 1.000001)
            i0 = pos.astype(np.int64)
            frac = pos - i0
            mass = np.zeros(grid_pts)
            np.add.at(mass, i0, self.weights * (1.0 - frac))
            np.add.at(mass, i0 + 1, self.weights * frac)
            half = int(np.ceil(5.0 * scale / h))
            taps = np.exp(-((np.arange(-half, half + 1) * h) ** 2) / (2.0 * scale**2))
            # centered slice of the full convolution: taps can outnumber the
            # grid when the atoms are tightly clustered, where mode="same"
            # would return len(taps) values instead of len(grid)
            vals = np.convolve(mass, taps)[half:half + grid_pts]
            self._kde[key] = (grid, vals)
        grid, vals = self._kde[key]
        q = np.asarray(query, dtype=float).reshape(-1)
        return np.interp(q, grid, vals, left=0.0, right=0.0)


class ActionLaw:
    """Weighted atoms on the action grid (the control law at one time)."""

    __slots__ = ("atoms", "masses")

    def __init__(self, atoms: np.ndarray, masses: np.ndarray):
        self.atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        masses = np.asarray(masses, dtype=float)
        s = masses.sum()
        if not np.isfinite(s) or s <= 0 or np.any(masses < -1e-15):
            raise GameValidationError("control-law masses must be nonnegative with positive mass")
        self.masses = np.clip(masses, 0.0, None) / s

    def mean(self) -> np.ndarray:
        return self.masses @ self.atoms

    def second_moment(self) -> float:
        return float(self.masses @ (self.atoms**2).sum(axis=1))


# ---------------------------------------------------------------------------
# game spec


@dataclass(frozen=True)
class Bounds:
    """Declared coefficient bounds the engine is allowed to rely on."""

    drift: float          # C: sup of |sigma^{-1} b|
    reward: float         # M: sup of |f1 + f2 + f3|
    action_lip: float     # L: Lipschitz constant of sigma^{-1} b in the action
    action_norm: float    # C_A: sup of |a| over the action set
    concavity: float | None = None  # m: strong-concavity modulus of f3 + z.sigma^{-1}b in a
    mono_slack: float = 0.0         # delta: allowed weak-monotonicity slack

    def __post_init__(self) -> None:
        for name in ("drift", "reward", "action_lip", "action_norm"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise GameValidationError(f"bound {name} must be finite and positive, got {v}")
        if self.concavity is not None and self.concavity <= 0:
            raise GameValidationError("concavity modulus must be positive when declared")
        if self.mono_slack < 0:
            raise GameValidationError("monotonicity slack must be nonnegative")

    def value_bound(self, lam: float) -> float:
        return self.reward / lam


@dataclass(frozen=True)
class StationaryParams:
    """Shell geometry and constants for the long-run diagnostics."""

    r_inner: float  # sphere radius the chain must return to
    r_outer: float  # sphere radius the chain must exit through
    margin: float   # declared lower bound on -(x.b + tr(sigma sigma^T)/2) outside r_inner
    lam_cap: float  # bound on |b|, |sigma|, |sigma^{-1}| inside the outer ball

    def __post_init__(self) -> None:
        if not (0 < self.r_inner < self.r_outer):
            raise GameValidationError("need 0 < r_inner < r_outer")
        if self.margin <= 0 or self.lam_cap <= 0:
            raise GameValidationError("margin and lam_cap must be positive")


@dataclass(frozen=True)
class InitialLaw:
    """Initial state sampler with a stable description."""

    kind: str  # delta | normal | uniform
    params: tuple[float, ...]

    @classmethod
    def delta(cls, x0: float = 0.0) -> "InitialLaw":
        return cls("delta", (float(x0),))

    @classmethod
    def normal(cls, mean: float = 0.0, std: float = 1.0) -> "InitialLaw":
        return cls("normal", (float(mean), float(std)))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "InitialLaw":
        return cls("uniform", (float(lo), float(hi)))

    def sample(self, gen: np.random.Generator, n: int, dim: int) -> np.ndarray:
        if self.kind == "delta":
            return np.full((n, dim), self.params[0])
        if self.kind == "normal":
            return self.params[0] + self.params[1] * gen.standard_normal((n, dim))
        if self.kind == "uniform":
            return gen.uniform(self.params[0], self.params[1], (n, dim))
        raise GameValidationError(f"unknown initial law {self.kind}")


DriftFn = Callable[[float, int, np.ndarray, "Marginal", np.ndarray], np.ndarray]
VolFn = Callable[[float, int, np.ndarray], np.ndarray]
StateRewardFn = Callable[[float, int, np.ndarray, "Marginal"], np.ndarray]
ActionRewardFn = Callable[[float, int, np.ndarray, np.ndarray], np.ndarray]
MixRewardFn = Callable[[float, "Marginal", "ActionLaw"], float]


@dataclass(frozen=True, eq=False)
class GameSpec:
    """A discounted game in separable form f1(t,x,mu) + f2(t,mu,q) + f3(t,x,a).

    Coefficient contract: callables receive (t, k, paths, ...) where paths is
    the full (N, K+1, dim) state array; only paths[:, :k+1] may be read. The
    action argument broadcasts: shape (dim_a,) applies one action to every
    path, shape (N, dim_a) is per-path.
    """

    name: str
    dim: int
    lam: float
    actions: ActionSet
    initial_law: InitialLaw
    drift: DriftFn
    vol: VolFn
    reward_state: StateRewardFn
    reward_action: ActionRewardFn
    bounds: Bounds
    reward_mix: MixRewardFn | None = None
    noise: str = "gaussian"
    time_homogeneous: bool = False
    drift_mu_free: bool = False
    stationary: StationaryParams | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise GameValidationError(f"discount rate must be positive, got {self.lam}")
        if self.dim < 1:
            raise GameValidationError("state dimension must be >= 1")
        if self.noise not in ("gaussian", "binomial"):
            raise GameValidationError(f"unknown noise kind {self.noise}")
        if self.actions.max_norm() > self.bounds.action_norm + 1e-12:
            raise GameValidationError("action grid escapes the declared action-norm bound")

    def value_bound(self) -> float:
        return self.bounds.value_bound(self.lam)

    def vol_inv(self, t: float, k: int, paths: np.ndarray) -> np.ndarray:
        """(N, dim, dim) inverse volatility at step k."""
        s = np.asarray(self.vol(t, k, paths), dtype=float)
        n = paths.shape[0]
        if s.ndim <= 1:  # scalar or per-path scalar shorthand, diagonal vol
            s = np.broadcast_to(np.atleast_1d(s)[..., None, None], (n, self.dim, self.dim)) * np.eye(self.dim)
            diag = np.einsum("nii->ni", s)
            if np.any(np.abs(diag) < 1e-12):
                raise GameValidationError("volatility is singular")
            out = np.zeros_like(s)
            np.einsum("nii->ni", out)[:] = 1.0 / diag
            return out
        return np.linalg.inv(s)

    def drift_over_vol(self, t: float, k: int, paths: np.ndarray, marginal: Marginal, a: np.ndarray,
                       vol_inv: np.ndarray | None = None) -> np.ndarray:
        """sigma^{-1} b, shape (N, dim)."""
        if vol_inv is None:
            vol_inv = self.vol_inv(t, k, paths)
        b = np.asarray(self.drift(t, k, paths, marginal, a), dtype=float)
        b = np.broadcast_to(b, (paths.shape[0], self.dim))
        return np.einsum("nij,nj->ni", vol_inv, b)


# ---------------------------------------------------------------------------
# Hamiltonian operations


def _as_z(z, n: int, dim: int) -> np.ndarray:
    """Normalize an adjoint argument to shape (N, dim)."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        return np.full((n, dim), float(z))
    if z.ndim == 1:
        if z.size == n and dim == 1:
            return z[:, None]
        if z.size == dim:
            return np.broadcast_to(z, (n, dim))
        raise GameValidationError(f"cannot interpret z of length {z.size} for N={n}, dim={dim}")
    return np.broadcast_to(z, (n, dim))


def hamiltonian_tilde(spec: GameSpec, t: float, k: int, paths: np.ndarray, marginal: Marginal,
                      qlaw: ActionLaw | None, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Time-rescaled running Hamiltonian f1 + f2 + f3 + z . sigma^{-1} b, shape (N,)."""
    n = paths.shape[0]
    z = _as_z(z, n, spec.dim)
    beta = spec.drift_over_vol(t, k, paths, marginal, a)
    out = np.broadcast_to(np.asarray(spec.reward_state(t, k, paths, marginal), dtype=float), (n,)).copy()
    out += np.broadcast_to(np.asarray(spec.reward_action(t, k, paths, a), dtype=float), (n,))
    out += np.einsum("ni,ni->n", z, beta)
    if spec.reward_mix is not None and qlaw is not None:
        out += float(spec.reward_mix(t, marginal, qlaw))
    return out


def maximize_hamiltonian(spec: GameSpec, t: float, k: int, paths: np.ndarray, marginal: Marginal,
                         z: np.ndarray, return_table: bool = False):
    """Grid argmax of the action-dependent part f3 + z . sigma^{-1} b.

    Returns (indices (N,), values (N,)) where values include the state reward
    f1 but not the mix term f2 (constant in a, added by the caller). Ties go
    to the smallest grid index.
    """
    n = paths.shape[0]
    z = _as_z(z, n, spec.dim)
    vinv = spec.vol_inv(t, k, paths)
    grid = spec.actions.atoms
    table = np.empty((n, grid.shape[0]))
    for j in range(grid.shape[0]):
        beta = spec.drift_over_vol(t, k, paths, marginal, grid[j], vol_inv=vinv)
        f3 = np.broadcast_to(np.asarray(spec.reward_action(t, k, paths, grid[j]), dtype=float), (n,))
        table[:, j] = f3 + np.einsum("ni,ni->n", z, beta)
    idx = np.argmax(table, axis=1)  # first occurrence wins ties
    vals = table[np.arange(n), idx] + np.broadcast_to(
        np.asarray(spec.reward_state(t, k, paths, marginal), dtype=float), (n,))
    if return_table:
        return idx, vals, table
    return idx, vals


# ---------------------------------------------------------------------------
# assumption checking


@dataclass
class AssumptionCheck:
    name: str
    status: str  # pass | fail | skipped
    bound: float | None = None
    worst: float | None = None
    witness: dict = field(default_factory=dict)
    n_samples: int = 0
    note: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "bound": self.bound,
            "worst": self.worst,
            "witness": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.witness.items()},
            "n_samples": self.n_samples,
            "note": self.note,
        }


@dataclass
class AssumptionReport:
    game: str
    checks: list[AssumptionCheck]

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def to_json(self) -> dict:
        return {"game": self.game, "passed": self.passed, "checks": [c.to_json() for c in self.checks]}


def check_standing_assumptions(
    spec: GameSpec,
    paths: np.ndarray,
    times: np.ndarray,
    marginals: Sequence[Marginal],
    qlaws: Sequence[ActionLaw] | None = None,
    n_samples: int = 200,
    seed: int = 0,
) -> AssumptionReport:
    """Sampled verification of the declared bounds and structural conventions.

    Draws (step, measure, action) tuples, evaluates the coefficients on the
    supplied path ensemble and compares against the declared constants. Also
    perturbs states strictly after the evaluation step to confirm coefficients
    are non-anticipative, and probes Lipschitz continuity in the action by
    secants over the grid.
    """
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    K = paths.shape[1] - 1
    grid = spec.actions.atoms
    qs = list(qlaws) if qlaws else [ActionLaw(grid, np.full(grid.shape[0], 1.0 / grid.shape[0]))]
    checks: list[AssumptionCheck] = []

    worst_drift, worst_drift_wit = -np.inf, {}
    worst_reward, worst_reward_wit = -np.inf, {}
    worst_lip, worst_lip_wit = -np.inf, {}
    anticipative = None
    for _ in range(n_samples):
        k = int(gen.integers(0, K))
        mu = marginals[int(gen.integers(0, len(marginals)))]
        q = qs[int(gen.integers(0, len(qs)))]
        j = int(gen.integers(0, grid.shape[0]))
        t = float(times[k])
        beta = spec.drift_over_vol(t, k, paths, mu, grid[j])
        bnorm = float(np.sqrt((beta**2).sum(axis=1)).max())
        if bnorm > worst_drift:
            worst_drift, worst_drift_wit = bnorm, {"t": t, "action": grid[j], "path": int(np.argmax((beta**2).sum(axis=1)))}
        f = np.asarray(spec.reward_state(t, k, paths, mu), dtype=float) + np.asarray(
            spec.reward_action(t, k, paths, grid[j]), dtype=float)
        if spec.reward_mix is not None:
            f = f + float(spec.reward_mix(t, mu, q))
        fmax = float(np.abs(f).max())
        if fmax > worst_reward:
            worst_reward, worst_reward_wit = fmax, {"t": t, "action": grid[j], "path": int(np.argmax(np.abs(f)))}
        j2 = int(gen.integers(0, grid.shape[0]))
        if j2 != j:
            beta2 = spec.drift_over_vol(t, k, paths, mu, grid[j2])
            gap = np.linalg.norm(grid[j] - grid[j2])
            sec = float(np.sqrt(((beta - beta2) ** 2).sum(axis=1)).max()) / gap
            if sec > worst_lip:
                worst_lip, worst_lip_wit = sec, {"t": t, "a": grid[j], "a2": grid[j2]}
        if anticipative is None and k < K - 1:
            # hold the measure object fixed so only the future-state bump varies
            bumped = paths.copy()
            bumped[:, k + 1:] += gen.standard_normal(bumped[:, k + 1:].shape)
            same = (
                np.array_equal(spec.drift_over_vol(t, k, bumped, mu, grid[j]),
                               spec.drift_over_vol(t, k, paths, mu, grid[j]))
                and np.array_equal(np.broadcast_to(np.asarray(spec.reward_state(t, k, bumped, mu), dtype=float), (paths.shape[0],)),
                                   np.broadcast_to(np.asarray(spec.reward_state(t, k, paths, mu), dtype=float), (paths.shape[0],)))
                and np.array_equal(np.broadcast_to(np.asarray(spec.reward_action(t, k, bumped, grid[j]), dtype=float), (paths.shape[0],)),
                                   np.broadcast_to(np.asarray(spec.reward_action(t, k, paths, grid[j]), dtype=float), (paths.shape[0],)))
            )
            anticipative = not same

    checks.append(AssumptionCheck(
        "drift_bound", "pass" if worst_drift <= spec.bounds.drift + 1e-9 else "fail",
        bound=spec.bounds.drift, worst=worst_drift, witness=worst_drift_wit, n_samples=n_samples))
    checks.append(AssumptionCheck(
        "reward_bound", "pass" if worst_reward <= spec.bounds.reward + 1e-9 else "fail",
        bound=spec.bounds.reward, worst=worst_reward, witness=worst_reward_wit, n_samples=n_samples))
    checks.append(AssumptionCheck(
        "action_lipschitz", "pass" if worst_lip <= spec.bounds.action_lip + 1e-9 else "fail",
        bound=spec.bounds.action_lip, worst=max(worst_lip, 0.0), witness=worst_lip_wit, n_samples=n_samples))
    checks.append(AssumptionCheck(
        "action_norm", "pass" if spec.actions.max_norm() <= spec.bounds.action_norm + 1e-12 else "fail",
        bound=spec.bounds.action_norm, worst=spec.actions.max_norm()))
    checks.append(AssumptionCheck(
        "non_anticipative", "pass" if anticipative is False else ("skipped" if anticipative is None else "fail"),
        n_samples=n_samples))
    s = np.asarray(spec.vol(float(times[0]), 0, paths), dtype=float)
    if s.ndim <= 1:
        mags = np.abs(np.atleast_1d(s))
        cond = float(mags.max() / mags.min()) if mags.min() > 0 else np.inf
    else:
        cond = float(np.linalg.cond(s).max())
    checks.append(AssumptionCheck(
        "vol_invertible", "pass" if np.all(np.isfinite(cond)) and cond < 1e8 else "fail", worst=cond))
    return AssumptionReport(game=spec.name, checks=checks)


@dataclass
class MonotonicityReport:
    """Worst Lasry-Lions pairing over the sampled measure pairs.

    `worst` is the largest value of int (f1(mu) - f1(nu)) d(mu - nu) minus the
    allowed slack delta * (H(mu,nu) + H(nu,mu)); nonpositive means monotone
    enough for the declared slack.
    """

    worst: float
    tol: float
    witness: dict
    per_pair: list

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def to_json(self) -> dict:
        return {"worst": self.worst, "tol": self.tol, "passed": self.passed,
                "witness": self.witness, "per_pair": self.per_pair}


def check_monotonicity(
    spec: GameSpec,
    paths: np.ndarray,
    times: np.ndarray,
    pairs: Sequence[tuple],
    tol: float = 1e-5,
) -> MonotonicityReport:
    """Sampled Lasry-Lions monotonicity check on the state coupling f1.

    Each pair is (weights_a, weights_b, entropy_sym) where the weights are
    per-step mass arrays of shape (K+1, N) over the shared atoms (rows need
    not be normalized) and entropy_sym is an optional per-step symmetrized
    relative-entropy flow used to grant the declared slack delta.
    """
    delta = spec.bounds.mono_slack
    worst, wit = -np.inf, {}
    per_pair = []
    for pi, pair in enumerate(pairs):
        wa, wb, ent = pair
        pair_worst = -np.inf
        for k in range(0, len(times) - 1):
            t = float(times[k])
            a = wa[k] / wa[k].sum()
            b = wb[k] / wb[k].sum()
            mu_a = Marginal(paths[:, k], a)
            mu_b = Marginal(paths[:, k], b)
            f_a = np.asarray(spec.reward_state(t, k, paths, mu_a), dtype=float)
            f_b = np.asarray(spec.reward_state(t, k, paths, mu_b), dtype=float)
            pairing = float((a - b) @ np.broadcast_to(f_a - f_b, (paths.shape[0],)))
            slack = delta * float(ent[k]) if (ent is not None and delta > 0) else 0.0
            val = pairing - slack
            if val > pair_worst:
                pair_worst = val
            if val > worst:
                worst, wit = val, {"pair": pi, "t": t, "pairing": pairing, "slack": slack}
        per_pair.append(pair_worst)
    return MonotonicityReport(worst=worst, tol=tol, witness=wit, per_pair=per_pair)
