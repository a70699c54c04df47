"""Experiment configuration schema.

A config is one JSON object naming a registry game, a mode, and the numeric
knobs the mode needs. Validation failures raise pydantic errors whose field
paths the CLI reports verbatim; the seed is mandatory because every artifact
must be reproducible from its manifest alone.
"""

from __future__ import annotations

import json
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .registry import game_names

Mode = Literal["solve", "finite-solve", "sweep", "stationary", "invariant", "check", "oracle"]

# modes that must know a finite horizon up front
_NEEDS_T_MAX = ("finite-solve",)
_NEEDS_HORIZONS = ("sweep",)


class GameRef(BaseModel):
    """Registry game name plus parameter overrides."""

    model_config = ConfigDict(extra="forbid")

    name: str
    params: dict[str, Any] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, v: str) -> str:
        if v not in game_names():
            raise ValueError(f"unknown game {v!r}; registry has {game_names()}")
        return v


class ExperimentConfig(BaseModel):
    """One experiment: game, mode, and numeric parameters.

    `game` accepts either a bare registry name or {"name": ..., "params":
    {...}} with builder overrides. Unknown fields are rejected so that a
    typo'd knob fails loudly instead of silently running defaults.
    """

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    game: str | GameRef
    mode: Mode
    seed: int

    n_paths: int = Field(default=4000, ge=2, alias="N")
    dt: float = Field(default=0.05, gt=0.0)
    t_max: float | None = Field(default=None, gt=0.0)
    tol: float = Field(default=1e-3, gt=0.0)
    tol_fp: float = Field(default=5e-3, gt=0.0)
    theta: float = Field(default=0.5, gt=0.0, le=1.0)
    n_actions: int | None = Field(default=None, ge=2, alias="n_A")
    bins: int = Field(default=64, ge=2)
    horizons: list[float] | None = None
    t_slices: list[float] | None = None
    conditioning: Literal["poly", "binned", "exact"] = "poly"
    max_iter: int = Field(default=40, ge=1)
    t_average: float = Field(default=64.0, gt=0.0)
    t_check: float = Field(default=16.0, gt=0.0)
    tol_invariance: float = Field(default=0.05, gt=0.0)
    mirror_tol: float = Field(default=0.03, gt=0.0)
    out: str | None = None
    workers: int = Field(default=1, ge=1)

    @field_validator("game")
    @classmethod
    def _game_known(cls, v: str | GameRef) -> str | GameRef:
        if isinstance(v, str) and v not in game_names():
            raise ValueError(f"unknown game {v!r}; registry has {game_names()}")
        return v

    @field_validator("horizons", "t_slices")
    @classmethod
    def _positive_sorted(cls, v: list[float] | None) -> list[float] | None:
        if v is None:
            return v
        if len(v) == 0 or any(x <= 0 for x in v):
            raise ValueError("must be a nonempty list of positive times")
        return sorted(v)

    @model_validator(mode="after")
    def _mode_requirements(self) -> "ExperimentConfig":
        if self.mode in _NEEDS_T_MAX and self.t_max is None:
            raise ValueError(f"mode {self.mode!r} requires t_max")
        if self.mode in _NEEDS_HORIZONS and not self.horizons:
            raise ValueError(f"mode {self.mode!r} requires horizons")
        return self

    @property
    def game_name(self) -> str:
        return self.game if isinstance(self.game, str) else self.game.name

    @property
    def game_params(self) -> dict[str, Any]:
        params = {} if isinstance(self.game, str) else dict(self.game.params)
        if self.n_actions is not None:
            params.setdefault("n_actions", self.n_actions)
        return params

    def echo(self) -> dict:
        """Round-trippable plain-dict form for the manifest."""
        return json.loads(self.model_dump_json(exclude_none=True))


def load_config(path: str, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Parse a JSON config file, applying CLI/env overrides before validation."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(raw)
