"""Command-line entry point.

One subcommand per experiment mode, all sharing the same options; each runs
the in-process runner by default, or ships the config to a running service
when --server is given. Exit codes: 0 clean, 2 solved-but-flagged (failed
convergence or a failed check), 1 hard error / invalid config.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from .config import ExperimentConfig, load_config
from .registry import game_names, make_game
from .runner import run_experiment

_MODES = ("solve", "finite-solve", "sweep", "stationary", "invariant", "check", "oracle")


@click.group()
def cli() -> None:
    """Discounted mean field game lab: solvers, rate sweeps, long-run checks."""


def _validation_message(err: ValidationError) -> str:
    lines = ["invalid config:"]
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {path}: {e['msg']}")
    return "\n".join(lines)


def _resolve_seed(cli_seed: int | None) -> int | None:
    """--seed beats MFG_SEED beats the config file."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("MFG_SEED")
    return int(env) if env else None


def _run_remote(server: str, cfg: ExperimentConfig) -> int:
    import httpx

    out = Path(cfg.out) if cfg.out else Path(f"runs/{cfg.mode}-{cfg.game_name}-{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    with httpx.Client(base_url=server, timeout=None) as client:
        resp = client.post("/runs", json=cfg.echo(), params={"wait": "true"})
        if resp.status_code >= 400:
            click.echo(f"server rejected the run: {resp.status_code} {resp.text}", err=True)
            return 1
        body = resp.json()
        run_id, status = body["run_id"], body["status"]
        names = list(body.get("manifest", {}).get("outputs", [])) + ["manifest.json"]
        for name in names:
            fresp = client.get(f"/runs/{run_id}/files/{name}")
            fresp.raise_for_status()
            (out / name).write_bytes(fresp.content)
    click.echo(f"run {run_id} finished with status {status}; artifacts in {out}")
    if status == "error":
        return 1
    return 2 if status == "flagged" else 0


def _execute(mode: str, config_path: str, seed: int | None, out: str | None,
             workers: int | None, server: str | None) -> None:
    overrides = {"mode": mode, "seed": _resolve_seed(seed), "out": out, "workers": workers}
    try:
        cfg = load_config(config_path, overrides)
    except ValidationError as err:
        click.echo(_validation_message(err), err=True)
        sys.exit(1)
    except (OSError, ValueError, json.JSONDecodeError) as err:
        click.echo(f"cannot load config: {err}", err=True)
        sys.exit(1)
    if server:
        sys.exit(_run_remote(server, cfg))
    try:
        result = run_experiment(cfg)
    except Exception as err:  # noqa: BLE001 - the contract is an exit code, not a traceback
        click.echo(f"run failed: {err}", err=True)
        sys.exit(1)
    click.echo(f"artifacts in {result.out_dir}"
               + (" (flagged)" if result.flagged else ""))
    sys.exit(2 if result.flagged else 0)


def _register(mode: str) -> None:
    @cli.command(name=mode, help=f"Run a {mode!r} experiment from a JSON config.")
    @click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
    @click.option("--seed", type=int, default=None, help="Override the config seed.")
    @click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
    @click.option("--workers", type=int, default=None, help="Parallelism cap (recorded in the manifest).")
    @click.option("--server", default=None, help="Run through a service instance at this base URL.")
    def _cmd(config_path: str, seed: int | None, out: str | None, workers: int | None,
             server: str | None, _mode: str = mode) -> None:
        _execute(_mode, config_path, seed, out, workers, server)


for _mode in _MODES:
    _register(_mode)


@cli.command()
def games() -> None:
    """List registry games with their default parameters."""
    for name in game_names():
        spec = make_game(name)
        click.echo(f"{name}: dim={spec.dim} lam={spec.lam} noise={spec.noise} "
                   f"actions={spec.actions.n_atoms} meta={json.dumps(spec.meta, sort_keys=True)}")


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True, type=int)
@click.option("--runs-dir", default="runs", show_default=True,
              help="Directory the service writes artifacts under.")
def serve(host: str, port: int, runs_dir: str) -> None:
    """Start the HTTP service wrapping the same runner."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(Path(runs_dir)), host=host, port=port)


def main() -> None:
    cli(prog_name="mfg-horizon")


if __name__ == "__main__":
    main()
