"""FastAPI application exposing the runner.

Runs execute in a single background worker (the kernels are vectorized
numpy; concurrency inside one process buys nothing) and write the same
artifact directories the CLI writes, under one root owned by the app.
"""

from __future__ import annotations

import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import FileResponse

from .. import __version__
from ..config import ExperimentConfig
from ..registry import game_names, make_game
from ..runner import run_experiment
from .schemas import GameInfo, Health, RunCreated, RunStatus


@dataclass
class _RunRecord:
    status: str = "queued"
    out_dir: Path | None = None
    manifest: dict | None = None
    error: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


def _execute(record: _RunRecord, cfg: ExperimentConfig) -> None:
    with record.lock:
        record.status = "running"
    try:
        result = run_experiment(cfg)
        with record.lock:
            record.out_dir = result.out_dir
            record.manifest = result.manifest
            record.status = "flagged" if result.flagged else "done"
    except Exception as err:  # noqa: BLE001 - surfaced through the status endpoint
        with record.lock:
            record.error = str(err)
            record.status = "error"


def create_app(runs_root: Path | str = "runs") -> FastAPI:
    runs_root = Path(runs_root)
    app = FastAPI(title="mfg-horizon", version=__version__)
    records: dict[str, _RunRecord] = {}
    executor = ThreadPoolExecutor(max_workers=1)

    @app.get("/health", response_model=Health)
    def health() -> Health:
        return Health(status="ok", version=__version__)

    @app.get("/games", response_model=list[GameInfo])
    def games() -> list[GameInfo]:
        out = []
        for name in game_names():
            spec = make_game(name)
            out.append(GameInfo(name=name, dim=spec.dim, lam=spec.lam, noise=spec.noise,
                                n_actions=spec.actions.n_atoms, meta=spec.meta))
        return out

    @app.post("/runs", response_model=RunCreated)
    def create_run(cfg: ExperimentConfig, wait: bool = Query(default=True)) -> RunCreated:
        run_id = uuid.uuid4().hex[:12]
        cfg = cfg.model_copy(update={"out": str(runs_root / run_id)})
        record = _RunRecord()
        records[run_id] = record
        if wait:
            _execute(record, cfg)
        else:
            executor.submit(_execute, record, cfg)
        return RunCreated(run_id=run_id, status=record.status, manifest=record.manifest)

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def get_run(run_id: str) -> RunStatus:
        record = records.get(run_id)
        if record is None:
            raise HTTPException(404, f"unknown run {run_id}")
        with record.lock:
            return RunStatus(run_id=run_id, status=record.status,
                             manifest=record.manifest, error=record.error)

    @app.get("/runs/{run_id}/files/{name}")
    def get_file(run_id: str, name: str) -> FileResponse:
        record = records.get(run_id)
        if record is None or record.out_dir is None:
            raise HTTPException(404, f"no artifacts for run {run_id}")
        allowed = set(record.manifest.get("outputs", [])) | {"manifest.json"}
        if name not in allowed:
            raise HTTPException(404, f"run {run_id} has no file {name!r}")
        return FileResponse(record.out_dir / name)

    return app
