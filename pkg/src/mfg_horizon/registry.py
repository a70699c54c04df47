"""Built-in games.

Four instances exercise the whole pipeline: a constant-reward sanity game
(analytic value), a monotone crowd-repulsion game used for the asymptotic
rate studies, a clipped Ornstein-Uhlenbeck game with drift confinement for
the long-run/stationary machinery, and a two-step binomial game small
enough for exhaustive enumeration.
"""

from __future__ import annotations

import numpy as np

from .games import (
    ActionSet,
    Bounds,
    GameSpec,
    GameValidationError,
    InitialLaw,
    StationaryParams,
)
from .oracle import DiscreteGameDef


def _act_scalar(a: np.ndarray, n: int) -> np.ndarray:
    """First action coordinate broadcast to (N,)."""
    a = np.asarray(a, dtype=float)
    col = a[..., 0] if a.ndim > 0 else a
    return np.broadcast_to(col, (n,))


def _constant_reward(reward_value: float = 1.0, lam: float = 0.5, n_actions: int = 41) -> GameSpec:
    """Zero-drift game with f == reward_value: value is reward_value/lam exactly."""
    c = float(reward_value)

    def drift(t, k, paths, marginal, a):
        return np.zeros((paths.shape[0], 1))

    def vol(t, k, paths):
        return np.ones(paths.shape[0])

    def f1(t, k, paths, marginal):
        return np.full(paths.shape[0], c)

    def f3(t, k, paths, a):
        return np.zeros(paths.shape[0])

    return GameSpec(
        name="constant-reward",
        dim=1,
        lam=lam,
        actions=ActionSet.interval(-1.0, 1.0, n_actions),
        initial_law=InitialLaw.delta(0.0),
        drift=drift,
        vol=vol,
        reward_state=f1,
        reward_action=f3,
        bounds=Bounds(drift=0.25, reward=abs(c), action_lip=0.25, action_norm=1.0),
        time_homogeneous=True,
        drift_mu_free=True,
        meta={"reward_value": c, "lam": lam, "n_actions": n_actions},
    )


def _gaussian_repulsion(
    repulsion: float = 0.5,
    kernel_scale: float = 0.75,
    control_cost: float = 0.5,
    lam: float = 0.5,
    n_actions: int = 41,
    init_std: float = 0.5,
    q_weight: float = 0.0,
) -> GameSpec:
    """Crowd repulsion through a Gaussian kernel, quadratic control cost.

    The state coupling -repulsion * (rho * mu)(x) is Lasry-Lions monotone
    (the Gaussian kernel is positive definite), the drift is the control
    itself, so the rate-study assumptions hold with delta = 0 and
    m = 2 * control_cost.
    """
    c0, cc, ks, qw = float(repulsion), float(control_cost), float(kernel_scale), float(q_weight)

    def drift(t, k, paths, marginal, a):
        n = paths.shape[0]
        return _act_scalar(a, n)[:, None]

    def vol(t, k, paths):
        return np.ones(paths.shape[0])

    def f1(t, k, paths, marginal):
        return -c0 * marginal.gaussian_kernel_density(paths[:, k, 0], ks)

    def f3(t, k, paths, a):
        n = paths.shape[0]
        av = _act_scalar(a, n)
        return -cc * av * av

    def f2(t, marginal, qlaw):
        m = float(qlaw.mean()[0])
        return -qw * m * m

    return GameSpec(
        name="gaussian-repulsion",
        dim=1,
        lam=lam,
        actions=ActionSet.interval(-1.0, 1.0, n_actions),
        initial_law=InitialLaw.normal(0.0, init_std),
        drift=drift,
        vol=vol,
        reward_state=f1,
        reward_action=f3,
        reward_mix=f2 if qw > 0 else None,
        bounds=Bounds(
            drift=1.0,
            reward=abs(c0) + cc + qw,
            action_lip=1.0,
            action_norm=1.0,
            concavity=2.0 * cc if cc > 0 else None,
            mono_slack=0.0,
        ),
        time_homogeneous=True,
        drift_mu_free=True,
        meta={
            "repulsion": c0, "kernel_scale": ks, "control_cost": cc, "lam": lam,
            "n_actions": n_actions, "init_std": init_std, "q_weight": qw,
        },
    )


def _clipped_ou_invariant(
    clip_level: float = 3.0,
    control_gain: float = 0.5,
    mean_pull: float = 0.2,
    repulsion: float = 0.5,
    kernel_scale: float = 0.75,
    control_cost: float = 0.5,
    lam: float = 0.5,
    n_actions: int = 41,
) -> GameSpec:
    """Clipped mean-reverting drift plus control and a mirror-symmetric coupling.

    The base drift clip(-x) confines the state (margin check passes on the
    shell between r_inner=2 and beyond r_outer=3), and every coefficient is
    equivariant under x -> -x, a -> -a, mu -> mirror(mu), so the invariant
    law is symmetric. Setting mean_pull = repulsion = 0 and freezing a = 0
    recovers the plain clipped Ornstein-Uhlenbeck process with stationary
    density proportional to exp(-x^2) inside the clip window.
    """
    cl, g, mp = float(clip_level), float(control_gain), float(mean_pull)
    c0, ks, cc = float(repulsion), float(kernel_scale), float(control_cost)

    def drift(t, k, paths, marginal, a):
        n = paths.shape[0]
        x = paths[:, k, 0]
        base = np.clip(-x, -cl, cl)
        pull = mp * np.clip(float(marginal.mean()[0]), -1.0, 1.0) if mp != 0.0 else 0.0
        return (base + g * _act_scalar(a, n) - pull)[:, None]

    def vol(t, k, paths):
        return np.ones(paths.shape[0])

    def f1(t, k, paths, marginal):
        if c0 == 0.0:
            return np.zeros(paths.shape[0])
        return -c0 * marginal.gaussian_kernel_density(paths[:, k, 0], ks)

    def f3(t, k, paths, a):
        n = paths.shape[0]
        av = _act_scalar(a, n)
        return -cc * av * av

    return GameSpec(
        name="clipped-ou-invariant",
        dim=1,
        lam=lam,
        actions=ActionSet.interval(-1.0, 1.0, n_actions),
        initial_law=InitialLaw.delta(0.0),
        drift=drift,
        vol=vol,
        reward_state=f1,
        reward_action=f3,
        bounds=Bounds(
            drift=cl + g + mp,
            reward=max(c0 + cc, 1e-6),
            action_lip=max(g, 1e-6),
            action_norm=1.0,
            concavity=2.0 * cc if cc > 0 else None,
        ),
        time_homogeneous=True,
        drift_mu_free=(mp == 0.0),
        stationary=StationaryParams(
            r_inner=2.0,
            r_outer=3.0,
            # worst shell margin at |x| = r_inner: x*clip(-x) + |x|(g + mp) + 1/2
            margin=2.0 * 2.0 - 2.0 * (g + mp) - 0.5,
            lam_cap=cl + g + mp,
        ),
        meta={
            "clip_level": cl, "control_gain": g, "mean_pull": mp, "repulsion": c0,
            "kernel_scale": ks, "control_cost": cc, "lam": lam, "n_actions": n_actions,
        },
    )


def _discrete_oracle(
    n_steps: int = 2,
    dt: float = 0.5,
    lam: float = 0.5,
    state_cost: float = 1.0,
    state_shift: float = 0.3,
    control_cost: float = 0.1,
) -> GameSpec:
    """Two-step binomial game, f = -state_cost*(x - shift)^2 - control_cost*a^2, b = a.

    Small enough for exhaustive enumeration; the engine must reproduce the
    enumerated equilibrium bit-for-bit (up to 1e-9) in exact-conditioning
    mode on the scenario-complete ensemble. The shift breaks the up/down
    symmetry so the equilibrium drives the state (nonzero martingale term,
    nontrivial weights): matching it exercises every coupling in the solver.
    """
    sc, sh, cc = float(state_cost), float(state_shift), float(control_cost)
    acts = (-1.0, 0.0, 1.0)
    # largest |x - shift| on the tree bounds the reward
    xmax = n_steps * np.sqrt(dt) + abs(sh)
    bound_m = sc * xmax * xmax + cc

    def drift(t, k, paths, marginal, a):
        n = paths.shape[0]
        return _act_scalar(a, n)[:, None]

    def vol(t, k, paths):
        return np.ones(paths.shape[0])

    def f1(t, k, paths, marginal):
        x = paths[:, k, 0]
        return -sc * (x - sh) * (x - sh)

    def f3(t, k, paths, a):
        n = paths.shape[0]
        av = _act_scalar(a, n)
        return -cc * av * av

    return GameSpec(
        name="discrete-oracle",
        dim=1,
        lam=lam,
        actions=ActionSet.from_atoms([[a] for a in acts]),
        initial_law=InitialLaw.delta(0.0),
        drift=drift,
        vol=vol,
        reward_state=f1,
        reward_action=f3,
        bounds=Bounds(drift=1.0, reward=bound_m, action_lip=1.0, action_norm=1.0, concavity=2.0 * cc),
        noise="binomial",
        time_homogeneous=False,
        drift_mu_free=True,
        meta={"n_steps": n_steps, "dt": dt, "lam": lam, "state_cost": sc,
              "state_shift": sh, "control_cost": cc},
    )


def discrete_oracle_def(
    n_steps: int = 2,
    dt: float = 0.5,
    lam: float = 0.5,
    state_cost: float = 1.0,
    state_shift: float = 0.3,
    control_cost: float = 0.1,
) -> DiscreteGameDef:
    """Scalar twin of the discrete-oracle game for the enumeration oracle."""
    sc, sh, cc = float(state_cost), float(state_shift), float(control_cost)
    xmax = n_steps * np.sqrt(dt) + abs(sh)
    return DiscreteGameDef(
        n_steps=n_steps,
        dt=dt,
        lam=lam,
        actions=(-1.0, 0.0, 1.0),
        x0=0.0,
        drift=lambda t, x, mu, a: a,
        sigma=lambda t, x: 1.0,
        reward=lambda t, x, mu, q, a: -sc * (x - sh) * (x - sh) - cc * a * a,
        reward_bound=sc * xmax * xmax + cc,
    )


_BUILDERS = {
    "constant-reward": _constant_reward,
    "gaussian-repulsion": _gaussian_repulsion,
    "clipped-ou-invariant": _clipped_ou_invariant,
    "discrete-oracle": _discrete_oracle,
}


def game_names() -> list[str]:
    return sorted(_BUILDERS)


def make_game(name: str, **params) -> GameSpec:
    """Instantiate a registry game, overriding its default parameters."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise GameValidationError(f"unknown game {name!r}; registry has {game_names()}") from None
    return builder(**params)
