"""Shared fixtures: small ensembles reused across test modules.

Session scope keeps the suite fast; tests must not mutate fixture arrays
(the ensembles are write-protected anyway).
"""

from __future__ import annotations

import numpy as np
import pytest

from mfg_horizon import make_game, simulate_ensemble

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    """Collect a criterion verdict for the end-of-run summary block."""
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter) -> None:
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def repulsion_spec():
    return make_game("gaussian-repulsion")


@pytest.fixture(scope="session")
def small_ensemble(repulsion_spec):
    """1500 paths over [0, 4]: enough for structural tests, cheap to build."""
    return simulate_ensemble(repulsion_spec, 1500, 4.0, 0.05, seed=101)


@pytest.fixture(scope="session")
def rng():
    return np.random.Generator(np.random.Philox(key=np.uint64(20260814)))
