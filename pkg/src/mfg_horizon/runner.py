"""Config-driven experiment runner.

One entry point, `run_experiment`, dispatches on config.mode, writes the
mode's artifacts into the output directory, and always finishes the manifest
(config echo, content hash over the output files, wall time) even when the
solve is flagged. Exit-code policy is the caller's job; the runner reports
`flagged` and raises on hard errors.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import rate_sweep
from .bsde import required_steps
from .config import ExperimentConfig
from .equilibrium import EquilibriumReport, solve_equilibrium
from .games import GameSpec, Marginal, check_monotonicity, check_standing_assumptions
from .oracle import enumerate_discrete_mfg, stationary_density_quadrature
from .paths import simulate_ensemble
from .registry import discrete_oracle_def, make_game
from .stationary import check_drift_condition, solve_invariant_mfg, solve_stationary_mfg


@dataclass(frozen=True)
class RunResult:
    out_dir: Path
    manifest: dict
    flagged: bool


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _content_hash(out_dir: Path, names: list[str]) -> str:
    """Tree-style hash: sha256 over (name, file sha256) pairs, sorted by name."""
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(hashlib.sha256((out_dir / name).read_bytes()).digest())
    return h.hexdigest()


def _equilibrium_rows(report: EquilibriumReport):
    """Per-step state/action summary under the equilibrium weights."""
    state = report.state
    atoms = state.action_atoms
    for k in range(state.weights.k_horizon + 1):
        mu = state.marginal(k)
        row = [float(state.ensemble.times[k]),
               float(mu.mean()[0]), mu.second_moment()]
        if k < state.q_masses.shape[0]:
            q = state.q_masses[k]
            a_mean = float(q @ atoms[:, 0])
            a_m2 = float(q @ (atoms**2).sum(axis=1))
        else:
            a_mean = a_m2 = float("nan")
        row += [a_mean, a_m2, state.weights.ess(k)]
        yield row


_EQ_HEADER = ["t", "state_mean", "state_m2", "action_mean", "action_m2", "ess"]
_RESID_HEADER = ["iteration", "tv", "w1", "residual", "value", "theta"]


def _write_equilibrium(out: Path, report: EquilibriumReport) -> list[str]:
    _write_csv(out / "equilibrium.csv", _EQ_HEADER, _equilibrium_rows(report))
    _write_csv(out / "residuals.csv", _RESID_HEADER,
               ([r.iteration, r.tv, r.w1, r.residual, r.value, r.theta] for r in report.history))
    return ["equilibrium.csv", "residuals.csv"]


def _equilibrium_summary(report: EquilibriumReport) -> dict:
    cert = report.certificate
    return {
        "value": report.value,
        "converged": report.converged,
        "iterations": report.iterations,
        "final_residual": report.final_residual,
        "fixed_point_residual": report.fixed_point_residual,
        "clamp_fraction": report.solution.clamp_fraction,
        "truncation": None if cert is None else {
            "t_used": cert.t_used, "tol_requested": cert.tol_requested,
            "tail_bound": cert.tail_bound,
        },
    }


def _run_solve(cfg: ExperimentConfig, spec: GameSpec, out: Path, finite: bool):
    if finite:
        t_sim = cfg.t_max
    else:
        t_sim = required_steps(spec, cfg.dt, cfg.tol) * cfg.dt
        if cfg.t_max is not None:
            t_sim = max(t_sim, cfg.t_max)
    ens = simulate_ensemble(spec, cfg.n_paths, t_sim, cfg.dt, seed=cfg.seed)
    kw = dict(tol_fp=cfg.tol_fp, theta=cfg.theta, max_iter=cfg.max_iter, bins=cfg.bins,
              conditioning=cfg.conditioning)
    if finite:
        report = solve_equilibrium(spec, ens, k_t=ens.index_of(cfg.t_max), **kw)
    else:
        report = solve_equilibrium(spec, ens, tol=cfg.tol, **kw)
    files = _write_equilibrium(out, report)
    return files, _equilibrium_summary(report), report.flagged


def _run_sweep(cfg: ExperimentConfig, spec: GameSpec, out: Path):
    t_need = required_steps(spec, cfg.dt, cfg.tol) * cfg.dt
    t_sim = max(max(cfg.horizons), t_need)
    ens = simulate_ensemble(spec, cfg.n_paths, t_sim, cfg.dt, seed=cfg.seed)
    t_lo = min(cfg.horizons)
    t_slices = cfg.t_slices or sorted({round(t_lo / 4.0, 6), round(t_lo / 2.0, 6)})
    sweep = rate_sweep(spec, ens, cfg.horizons, t_slices=t_slices, tol=cfg.tol,
                       tol_fp=cfg.tol_fp, theta=cfg.theta, max_iter=cfg.max_iter,
                       bins=cfg.bins, conditioning=cfg.conditioning)
    sweep.to_csv(out / "sweep.csv")
    summary = {
        "tv_slope": sweep.tv_slope,
        "tv_bound_slope": sweep.tv_bound_slope,
        "entropy_slope": sweep.entropy_slope,
        "rate_denom": sweep.rate_denom,
        "assumptions_ok": sweep.assumptions_ok,
        "notes": sweep.notes,
    }
    flagged = (not all(r.converged for r in sweep.rows)) or not sweep.assumptions_ok
    return ["sweep.csv"], summary, flagged


_STAT_RESID_HEADER = ["iteration", "residual_tv", "value", "gamma_hat"]


def _run_stationary(cfg: ExperimentConfig, spec: GameSpec, out: Path, invariant: bool):
    kw = dict(max_outer=cfg.max_iter, n_bsde=cfg.n_paths,
              dt_bsde=cfg.dt, tol_bsde=cfg.tol, n_sim=cfg.n_paths,
              t_average=cfg.t_average, policy_bins=cfg.bins, conditioning=cfg.conditioning)
    if invariant:
        rep = solve_invariant_mfg(spec, tol=cfg.tol_invariance, t_check=cfg.t_check,
                                  n_check=cfg.n_paths, mirror_tol=cfg.mirror_tol,
                                  seed=cfg.seed, stationary_tol=cfg.tol_fp, **kw)
        stat = rep.stationary
    else:
        rep = None
        stat = solve_stationary_mfg(spec, tol=cfg.tol_fp, seed=cfg.seed, **kw)
    stat.estimate.to_csv(out / "stationary.csv")
    _write_csv(out / "residuals.csv", _STAT_RESID_HEADER,
               ([r.iteration, r.residual_tv, r.value, r.gamma_hat] for r in stat.history))
    files = ["stationary.csv", "residuals.csv"]
    summary = {
        "value": stat.value,
        "converged": stat.converged,
        "iterations": stat.iterations,
        "gamma_hat": stat.estimate.gamma_hat,
        "certificate_error": stat.estimate.certificate_error,
        "mean": stat.estimate.mean,
        "second_moment": stat.estimate.second_moment,
        "drift_margin": stat.drift_report.min_margin,
    }
    if invariant:
        rep.trace_to_csv(out / "invariance.csv")
        files.append("invariance.csv")
        summary.update(max_tv=rep.max_tv, noise_band=rep.noise_band, mirror_tv=rep.mirror_tv,
                       invariant_ok=rep.invariant_ok, symmetric_ok=rep.symmetric_ok)
        return files, summary, rep.flagged
    return files, summary, stat.flagged


def _run_check(cfg: ExperimentConfig, spec: GameSpec, out: Path):
    t_sim = cfg.t_max if cfg.t_max is not None else 4.0
    ens = simulate_ensemble(spec, min(cfg.n_paths, 4000), t_sim, cfg.dt, seed=cfg.seed)
    ks = sorted({0, ens.n_steps // 2, ens.n_steps})
    margs = [Marginal(ens.states[:, k]) for k in ks]
    assum = check_standing_assumptions(spec, ens.states, ens.times, margs, seed=cfg.seed)
    gen = np.random.Generator(np.random.Philox(key=np.uint64(cfg.seed)))
    shape = (ens.n_steps + 1, ens.n_paths)
    pairs = [(np.abs(1.0 + 0.3 * gen.standard_normal(shape)),
              np.abs(1.0 + 0.3 * gen.standard_normal(shape)), None) for _ in range(3)]
    mono = check_monotonicity(spec, ens.states, ens.times, pairs)
    payload = {"assumptions": assum.to_json(), "monotonicity": mono.to_json()}
    if spec.stationary is not None:
        drift = check_drift_condition(spec)
        payload["drift_condition"] = {
            "passed": drift.passed, "min_margin": drift.min_margin,
            "declared_margin": drift.declared_margin, "worst_norm": drift.worst_norm,
        }
    with open(out / "assumptions.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    flagged = not (assum.passed and mono.passed
                   and payload.get("drift_condition", {"passed": True})["passed"])
    summary = {"assumptions_passed": assum.passed, "monotone": mono.passed,
               "monotone_worst": mono.worst}
    return ["assumptions.json"], summary, flagged


def _run_oracle(cfg: ExperimentConfig, spec: GameSpec, out: Path):
    name = cfg.game_name
    if name == "discrete-oracle":
        game = discrete_oracle_def(**cfg.game_params)
        sol = enumerate_discrete_mfg(game)
        slot_rows = []
        for k in range(game.n_steps):
            for node in range(2**k):
                slot = 2**k - 1 + node
                slot_rows.append([slot, k, node, game.actions[sol.policy_slots[slot]]])
        _write_csv(out / "oracle_policy.csv", ["slot", "step", "node", "action"], slot_rows)
        rows = []
        for k, marg in enumerate(sol.marginals):
            rows += [[k, x, m] for x, m in marg]
        _write_csv(out / "oracle_marginals.csv", ["step", "x", "mass"], rows)
        summary = {"value": sol.value, "dp_value": sol.dp_value,
                   "n_equilibria": sol.n_equilibria, "dp_agrees": sol.dp_agrees,
                   "n_policies": sol.n_policies}
        return ["oracle_policy.csv", "oracle_marginals.csv"], summary, sol.n_equilibria != 1
    if name == "clipped-ou-invariant":
        params = {"mean_pull": 0.0, "repulsion": 0.0, **cfg.game_params}
        frozen = make_game(name, **params)

        def b(x):
            arr = np.asarray(x, dtype=float).reshape(-1, 1, 1)
            zero = np.zeros(frozen.actions.dim)
            return np.asarray(frozen.drift(0.0, 0, arr, Marginal(np.zeros((1, 1))), zero))[:, 0]

        dens = stationary_density_quadrature(b)
        _write_csv(out / "oracle_density.csv", ["x", "density"],
                   zip(dens.grid, dens.density))
        summary = {"second_moment": dens.second_moment, "mean": dens.mean}
        return ["oracle_density.csv"], summary, False
    if name == "constant-reward":
        c = spec.meta["reward_value"]
        _write_csv(out / "oracle_value.csv", ["quantity", "value"],
                   [["value", c / spec.lam]])
        return ["oracle_value.csv"], {"value": c / spec.lam}, False
    raise ValueError(f"no oracle is defined for game {name!r}")


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Execute one configured experiment, writing artifacts plus manifest.json."""
    t0 = time.monotonic()
    out = Path(cfg.out) if cfg.out else Path(f"runs/{cfg.mode}-{cfg.game_name}-{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    spec = make_game(cfg.game_name, **cfg.game_params)
    manifest: dict = {
        "package": "mfg-horizon",
        "version": __version__,
        "config": cfg.echo(),
        "game": cfg.game_name,
        "mode": cfg.mode,
        "seed": cfg.seed,
    }
    flagged = True
    files: list[str] = []
    try:
        if cfg.mode in ("solve", "finite-solve"):
            files, summary, flagged = _run_solve(cfg, spec, out, finite=cfg.mode == "finite-solve")
        elif cfg.mode == "sweep":
            files, summary, flagged = _run_sweep(cfg, spec, out)
        elif cfg.mode in ("stationary", "invariant"):
            files, summary, flagged = _run_stationary(cfg, spec, out, invariant=cfg.mode == "invariant")
        elif cfg.mode == "check":
            files, summary, flagged = _run_check(cfg, spec, out)
        elif cfg.mode == "oracle":
            files, summary, flagged = _run_oracle(cfg, spec, out)
        else:  # pragma: no cover - config schema rejects unknown modes
            raise ValueError(f"unhandled mode {cfg.mode}")
        manifest["results"] = summary
    finally:
        # manifest lands even when the solve raised midway
        manifest["outputs"] = files
        manifest["flagged"] = flagged
        manifest["content_hash"] = _content_hash(out, files)
        manifest["wall_time_s"] = round(time.monotonic() - t0, 3)
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return RunResult(out_dir=out, manifest=manifest, flagged=flagged)
