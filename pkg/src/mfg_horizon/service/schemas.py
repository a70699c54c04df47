"""Request/response models for the run service.

The run request body is the experiment config itself (same schema as the
CLI's JSON file), so a config that works offline works against the service
unchanged.
"""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel

RunStatusName = Literal["queued", "running", "done", "flagged", "error"]


class RunCreated(BaseModel):
    run_id: str
    status: RunStatusName
    manifest: dict[str, Any] | None = None


class RunStatus(BaseModel):
    run_id: str
    status: RunStatusName
    manifest: dict[str, Any] | None = None
    error: str | None = None


class GameInfo(BaseModel):
    name: str
    dim: int
    lam: float
    noise: str
    n_actions: int
    meta: dict[str, Any]


class Health(BaseModel):
    status: Literal["ok"]
    version: str
