"""Driftless path ensembles and Girsanov measure weights.

The ensemble is simulated once under the reference measure (no drift) and
never mutated; every controlled or candidate population measure is carried
as a flow of Doleans-Dade weights over the same paths. Noise is generated
from counter-based streams keyed by (seed, path index), so results do not
depend on how work is chunked.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .games import GameSpec, Marginal


class DriftBoundError(ValueError):
    """A drift field escaped the declared bound; weights would be invalid."""


MAX_DT = 0.05  # grid cap for diffusive (gaussian) ensembles


def _path_generator(seed: int, path: int, lane: int = 0) -> np.random.Generator:
    """Counter-based stream for one path: key = seed, counter block = (lane, path)."""
    ctr = np.array([0, 0, path, lane], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=np.uint64(seed), counter=ctr))


def step_generator(seed: int, step: int, lane: int = 8) -> np.random.Generator:
    """Counter-based stream keyed by step, for streaming simulations."""
    ctr = np.array([0, 0, step, lane], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=np.uint64(seed), counter=ctr))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Immutable driftless ensemble on a uniform grid.

    states[i, k] is path i at time k*dt; increments[i, k] is the Brownian
    step taken from k to k+1 (so states obeys the driftless Euler recursion
    with the game's volatility).
    """

    states: np.ndarray      # (N, K+1, d)
    increments: np.ndarray  # (N, K, d)
    times: np.ndarray       # (K+1,)
    seed: int
    noise: str

    def __post_init__(self) -> None:
        self.states.setflags(write=False)
        self.increments.setflags(write=False)
        self.times.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def index_of(self, t: float) -> int:
        """Grid index of time t (must sit on the grid)."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or abs(k * self.dt - t) > 1e-9:
            raise ValueError(f"time {t} is not on the grid (dt={self.dt}, horizon={self.horizon})")
        return k

    def prefix(self, k_t: int) -> "PathEnsemble":
        """Restriction to the first k_t steps; views, bit-identical states."""
        if not 0 <= k_t <= self.n_steps:
            raise ValueError(f"k_t={k_t} outside 0..{self.n_steps}")
        return PathEnsemble(self.states[:, : k_t + 1], self.increments[:, :k_t],
                            self.times[: k_t + 1], self.seed, self.noise)

    def law_check(self) -> dict:
        """Sampling diagnostics: worst per-step mean-increment norm vs 4 sqrt(d dt / N)."""
        mean_steps = self.increments.mean(axis=0)  # (K, d)
        worst = float(np.sqrt((mean_steps**2).sum(axis=1)).max()) if self.n_steps else 0.0
        bound = 4.0 * math.sqrt(self.dim * self.dt / self.n_paths)
        var_ratio = float(self.increments.var() / self.dt) if self.n_steps else 1.0
        return {"worst_mean_norm": worst, "bound": bound, "ok": worst <= bound, "var_ratio": var_ratio}

    # -- persistence ---------------------------------------------------------

    def save_npz(self, path) -> None:
        np.savez_compressed(path, states=self.states, increments=self.increments,
                            times=self.times, seed=self.seed, noise=self.noise)

    @classmethod
    def load_npz(cls, path) -> "PathEnsemble":
        d = np.load(path, allow_pickle=False)
        return cls(states=d["states"].copy(), increments=d["increments"].copy(),
                   times=d["times"].copy(), seed=int(d["seed"]), noise=str(d["noise"]))

    def to_csv(self, path) -> None:
        """Long-format dump: one row per (path, step); increment columns are
        empty on the final step. Full float round-trip precision."""
        d = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "t"] + [f"x{j}" for j in range(d)] + [f"dw{j}" for j in range(d)])
            for i in range(self.n_paths):
                for k in range(self.n_steps + 1):
                    row = [i, k, repr(float(self.times[k]))]
                    row += [repr(float(v)) for v in self.states[i, k]]
                    row += [repr(float(v)) for v in self.increments[i, k]] if k < self.n_steps else [""] * d
                    w.writerow(row)

    @classmethod
    def from_csv(cls, path, seed: int = 0, noise: str = "gaussian") -> "PathEnsemble":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(1 for c in header if c.startswith("x"))
        n = max(int(r[0]) for r in body) + 1
        ksteps = max(int(r[1]) for r in body)
        states = np.empty((n, ksteps + 1, d))
        increments = np.zeros((n, ksteps, d))
        times = np.empty(ksteps + 1)
        for r in body:
            i, k = int(r[0]), int(r[1])
            times[k] = float(r[2])
            states[i, k] = [float(v) for v in r[3:3 + d]]
            if k < ksteps:
                increments[i, k] = [float(v) for v in r[3 + d:3 + 2 * d]]
        return cls(states=states, increments=increments, times=times, seed=seed, noise=noise)


def simulate_ensemble(spec: GameSpec, n_paths: int, t_max: float, dt: float, seed: int) -> PathEnsemble:
    """Euler ensemble of the driftless dynamics dX = sigma dW from the initial law.

    Each path consumes its own counter-based stream: initial draw first, then
    the K increments, so any prefix of the ensemble is reproducible from
    (seed, path) alone.
    """
    if spec.noise == "gaussian" and dt > MAX_DT + 1e-12:
        raise ValueError(f"dt={dt} exceeds the diffusive grid cap {MAX_DT}")
    k_steps = int(round(t_max / dt))
    if k_steps < 1 or abs(k_steps * dt - t_max) > 1e-9:
        raise ValueError(f"t_max={t_max} is not a multiple of dt={dt}")
    d = spec.dim
    sqdt = math.sqrt(dt)
    init = np.empty((n_paths, d))
    incr = np.empty((n_paths, k_steps, d))
    for i in range(n_paths):
        gen = _path_generator(seed, i)
        init[i] = spec.initial_law.sample(gen, 1, d)[0]
        if spec.noise == "gaussian":
            incr[i] = gen.standard_normal((k_steps, d)) * sqdt
        else:
            incr[i] = np.where(gen.random((k_steps, d)) < 0.5, -sqdt, sqdt)
    times = np.arange(k_steps + 1) * dt
    states = np.empty((n_paths, k_steps + 1, d))
    states[:, 0] = init
    for k in range(k_steps):
        vol = np.asarray(spec.vol(float(times[k]), k, states), dtype=float)
        if vol.ndim <= 1:
            step = np.atleast_1d(vol)[..., None] * incr[:, k] if vol.ndim == 1 else float(vol) * incr[:, k]
        else:
            step = np.einsum("nij,nj->ni", vol, incr[:, k])
        states[:, k + 1] = states[:, k] + step
    return PathEnsemble(states=states, increments=incr, times=times, seed=seed, noise=spec.noise)


def enumerate_binomial_ensemble(spec: GameSpec, n_steps: int, dt: float) -> PathEnsemble:
    """Scenario-complete binomial ensemble: path s realizes increment signs
    from the bits of s (bit k set = up-move at step k). Requires a point
    initial law; used by the exact-conditioning mode."""
    if spec.noise != "binomial":
        raise ValueError("scenario enumeration requires a binomial-noise game")
    if spec.initial_law.kind != "delta":
        raise ValueError("scenario enumeration requires a point initial law")
    n = 2**n_steps
    d = spec.dim
    sqdt = math.sqrt(dt)
    incr = np.empty((n, n_steps, d))
    for s in range(n):
        for k in range(n_steps):
            incr[s, k] = sqdt if (s >> k) & 1 else -sqdt
    times = np.arange(n_steps + 1) * dt
    states = np.empty((n, n_steps + 1, d))
    states[:, 0] = spec.initial_law.params[0]
    for k in range(n_steps):
        vol = np.asarray(spec.vol(float(times[k]), k, states), dtype=float)
        if vol.ndim <= 1:
            step = np.atleast_1d(vol)[..., None] * incr[:, k] if vol.ndim == 1 else float(vol) * incr[:, k]
        else:
            step = np.einsum("nij,nj->ni", vol, incr[:, k])
        states[:, k + 1] = states[:, k] + step
    return PathEnsemble(states=states, increments=incr, times=times, seed=0, noise="binomial")


# ---------------------------------------------------------------------------
# measure weights


@dataclass(frozen=True, eq=False)
class MeasureWeights:
    """Flow of Doleans-Dade weights over a shared ensemble.

    w_flow[i, k] is the density of the target measure against the reference
    on the sigma-field generated up to grid index k. Pure measure changes
    carry their drift field; convex mixtures of weight flows are still valid
    density flows but have no single drift (drift is None there).
    """

    w_flow: np.ndarray            # (N, K_w + 1)
    times: np.ndarray             # (K_w + 1,)
    drift: np.ndarray | None      # (N, K_w, d) or None for mixtures

    def __post_init__(self) -> None:
        self.w_flow.setflags(write=False)
        if self.drift is not None:
            self.drift.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.w_flow.shape[0]

    @property
    def k_horizon(self) -> int:
        return self.w_flow.shape[1] - 1

    def weights(self, k: int | None = None) -> np.ndarray:
        return self.w_flow[:, self.k_horizon if k is None else k]

    def normalized(self, k: int | None = None) -> np.ndarray:
        w = self.weights(k)
        return w / w.sum()

    def log_weights(self, k: int | None = None) -> np.ndarray:
        return np.log(self.weights(k))

    def ess(self, k: int | None = None) -> float:
        w = self.weights(k)
        return float(w.sum() ** 2 / (w**2).sum())

    def project(self, k_t: int) -> "MeasureWeights":
        """Restriction to horizon k_t; the weight columns are shared views,
        so projected weights are bit-identical to the originals."""
        if not 0 <= k_t <= self.k_horizon:
            raise ValueError(f"k_t={k_t} outside 0..{self.k_horizon}")
        return MeasureWeights(self.w_flow[:, : k_t + 1], self.times[: k_t + 1],
                              None if self.drift is None else self.drift[:, :k_t])

    def diagnostics(self, drift_bound: float) -> dict:
        """Mean-one and second-moment sanity versus the exponential envelope."""
        t = float(self.times[-1] - self.times[0])
        w = self.weights()
        mean = float(w.mean())
        second = float((w**2).mean())
        env = math.exp(drift_bound**2 * t)
        mean_band = 5.0 / math.sqrt(self.n_paths) * env
        return {
            "mean": mean,
            "mean_band": mean_band,
            "mean_ok": abs(mean - 1.0) <= mean_band,
            "second_moment": second,
            "second_moment_bound": 2.0 * env,
            "second_ok": second <= 2.0 * env,
            "ess": self.ess(),
        }


def girsanov_weights(ensemble: PathEnsemble, drift_field: np.ndarray, drift_bound: float,
                     k_t: int | None = None) -> MeasureWeights:
    """Cumulative Doleans-Dade weights of the measure with drift sigma^{-1}b.

    drift_field[i, k] is the reweighting drift (already vol-inverted) on
    step k. Hard error if it escapes the declared bound: beyond it the
    exponential-moment guarantees that make the weights usable are gone.
    """
    k_t = ensemble.n_steps if k_t is None else k_t
    beta = np.asarray(drift_field, dtype=float)
    if beta.shape[0] != ensemble.n_paths or beta.shape[1] < k_t:
        raise ValueError(f"drift field shape {beta.shape} does not cover {k_t} steps")
    beta = beta[:, :k_t]
    norms = np.sqrt((beta**2).sum(axis=2))
    worst = float(norms.max()) if norms.size else 0.0
    if worst > drift_bound + 1e-9:
        raise DriftBoundError(f"drift norm {worst} exceeds declared bound {drift_bound}")
    dt = ensemble.dt
    inc = np.einsum("nkd,nkd->nk", beta, ensemble.increments[:, :k_t])
    inc -= 0.5 * (norms**2) * dt
    log_flow = np.concatenate([np.zeros((ensemble.n_paths, 1)), np.cumsum(inc, axis=1)], axis=1)
    return MeasureWeights(w_flow=np.exp(log_flow), times=ensemble.times[: k_t + 1].copy(), drift=beta.copy())


def unit_weights(ensemble: PathEnsemble, k_t: int | None = None) -> MeasureWeights:
    """The reference measure itself (zero drift)."""
    k_t = ensemble.n_steps if k_t is None else k_t
    return MeasureWeights(
        w_flow=np.ones((ensemble.n_paths, k_t + 1)),
        times=ensemble.times[: k_t + 1].copy(),
        drift=np.zeros((ensemble.n_paths, k_t, ensemble.dim)),
    )


def mix_weights(a: MeasureWeights, b: MeasureWeights, theta: float) -> MeasureWeights:
    """Convex mixture (1-theta) a + theta b of two density flows."""
    if a.w_flow.shape != b.w_flow.shape:
        raise ValueError("cannot mix weight flows with different horizons")
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    return MeasureWeights(w_flow=(1.0 - theta) * a.w_flow + theta * b.w_flow,
                          times=a.times.copy(), drift=None)


def reweighted_marginal(ensemble: PathEnsemble, weights: MeasureWeights, k: int) -> Marginal:
    """Time-k state marginal of the reweighted measure (weights at horizon k,
    the variance-optimal choice: the weight flow is a martingale)."""
    return Marginal(ensemble.states[:, k], weights.weights(k))
