"""Driftless ensembles and Girsanov weight flows."""

from __future__ import annotations

import math

import numpy as np
import pytest

from mfg_horizon import (
    DriftBoundError,
    girsanov_weights,
    make_game,
    mix_weights,
    reweighted_marginal,
    simulate_ensemble,
    unit_weights,
)
from mfg_horizon.paths import MAX_DT, PathEnsemble, enumerate_binomial_ensemble


def test_ensemble_shapes_and_grid(small_ensemble):
    ens = small_ensemble
    assert ens.states.shape == (1500, ens.n_steps + 1, 1)
    assert ens.increments.shape == (1500, ens.n_steps, 1)
    assert ens.dt == pytest.approx(0.05)
    assert ens.horizon == pytest.approx(4.0)
    assert ens.index_of(2.0) == 40
    with pytest.raises(ValueError):
        ens.index_of(2.013)


def test_ensemble_arrays_write_protected(small_ensemble):
    with pytest.raises(ValueError):
        small_ensemble.states[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        small_ensemble.increments[0, 0, 0] = 1.0


def test_seed_determinism(repulsion_spec):
    a = simulate_ensemble(repulsion_spec, 64, 1.0, 0.05, seed=7)
    b = simulate_ensemble(repulsion_spec, 64, 1.0, 0.05, seed=7)
    c = simulate_ensemble(repulsion_spec, 64, 1.0, 0.05, seed=8)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.states, c.states)


def test_path_extension_is_prefix_stable(repulsion_spec):
    """Extending the horizon must not disturb already-simulated steps: the
    noise stream is keyed per path, not per (path, horizon)."""
    short = simulate_ensemble(repulsion_spec, 32, 1.0, 0.05, seed=5)
    long = simulate_ensemble(repulsion_spec, 32, 2.0, 0.05, seed=5)
    assert np.array_equal(short.states, long.states[:, : short.n_steps + 1])
    assert np.array_equal(short.increments, long.increments[:, : short.n_steps])


def test_law_check_and_dt_cap(small_ensemble, repulsion_spec):
    diag = small_ensemble.law_check()
    assert diag["ok"], diag
    assert diag["var_ratio"] == pytest.approx(1.0, abs=0.05)
    with pytest.raises(ValueError):
        simulate_ensemble(repulsion_spec, 16, 1.0, 2 * MAX_DT, seed=0)
    with pytest.raises(ValueError):
        simulate_ensemble(repulsion_spec, 16, 1.03, 0.05, seed=0)


def test_binomial_dt_exempt_from_cap():
    spec = make_game("discrete-oracle")
    ens = simulate_ensemble(spec, 128, 1.0, 0.5, seed=3)
    assert set(np.round(np.unique(ens.increments), 12)) == {
        round(-math.sqrt(0.5), 12), round(math.sqrt(0.5), 12)}


def test_prefix_shares_memory(small_ensemble):
    pre = small_ensemble.prefix(10)
    assert pre.n_steps == 10
    assert np.shares_memory(pre.states, small_ensemble.states)
    assert np.array_equal(pre.times, small_ensemble.times[:11])


def test_scenario_enumeration_complete():
    spec = make_game("discrete-oracle")
    ens = enumerate_binomial_ensemble(spec, 2, 0.5)
    assert ens.n_paths == 4
    signs = np.sign(ens.increments[:, :, 0]).astype(int)
    assert sorted(map(tuple, signs)) == [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    gaussian = make_game("gaussian-repulsion")
    with pytest.raises(ValueError):
        enumerate_binomial_ensemble(gaussian, 2, 0.5)


def test_npz_round_trip(tmp_path, small_ensemble):
    p = tmp_path / "ens.npz"
    small_ensemble.save_npz(p)
    back = PathEnsemble.load_npz(p)
    assert np.array_equal(back.states, small_ensemble.states)
    assert np.array_equal(back.increments, small_ensemble.increments)
    assert np.array_equal(back.times, small_ensemble.times)
    assert back.seed == small_ensemble.seed and back.noise == small_ensemble.noise


def test_csv_round_trip(tmp_path, repulsion_spec):
    ens = simulate_ensemble(repulsion_spec, 8, 0.25, 0.05, seed=11)
    p = tmp_path / "ens.csv"
    ens.to_csv(p)
    back = PathEnsemble.from_csv(p, seed=ens.seed)
    assert np.array_equal(back.states, ens.states)
    assert np.array_equal(back.increments, ens.increments)
    assert np.array_equal(back.times, ens.times)


# ---------------------------------------------------------------------------
# weight flows


def _constant_drift(ens: PathEnsemble, beta: float) -> np.ndarray:
    return np.full((ens.n_paths, ens.n_steps, ens.dim), beta)


def test_weight_flow_closed_form(small_ensemble):
    """log E(W) must equal beta*W_t - beta^2 t/2 exactly for constant beta."""
    ens = small_ensemble
    w = girsanov_weights(ens, _constant_drift(ens, 1.0), drift_bound=1.0)
    k = ens.index_of(2.0)
    wt = ens.increments[:, :k, 0].sum(axis=1)
    assert np.allclose(w.weights(k), np.exp(wt - 0.5 * 2.0), rtol=1e-12)
    assert w.weights(0) == pytest.approx(1.0)


def test_weight_mean_and_second_moment(repulsion_spec):
    ens = simulate_ensemble(repulsion_spec, 40000, 1.0, 0.05, seed=21)
    w = girsanov_weights(ens, _constant_drift(ens, 1.0), drift_bound=1.0)
    diag = w.diagnostics(repulsion_spec.bounds.drift)
    assert diag["mean_ok"], diag
    assert diag["second_ok"], diag
    # E[E(W)^2] = exp(beta^2 t) exactly; MC check at t = 1
    assert diag["second_moment"] == pytest.approx(math.e, rel=0.15)


def test_drift_bound_enforced(small_ensemble):
    with pytest.raises(DriftBoundError):
        girsanov_weights(small_ensemble, _constant_drift(small_ensemble, 1.5), drift_bound=1.0)


def test_unit_weights_are_neutral(small_ensemble):
    w = unit_weights(small_ensemble)
    assert np.all(w.w_flow == 1.0)
    assert w.ess() == pytest.approx(small_ensemble.n_paths)
    mu = reweighted_marginal(small_ensemble, w, 5)
    assert mu.mean()[0] == pytest.approx(small_ensemble.states[:, 5, 0].mean())


def test_projection_bit_identity(small_ensemble):
    """Projecting a weight flow must equal rebuilding it on the prefix."""
    ens = small_ensemble
    beta = _constant_drift(ens, 0.7)
    full = girsanov_weights(ens, beta, drift_bound=1.0)
    k = 20
    pre = girsanov_weights(ens.prefix(k), beta[:, :k], drift_bound=1.0)
    assert np.array_equal(full.project(k).w_flow, pre.w_flow)


def test_mix_weights_interpolates(small_ensemble):
    a = unit_weights(small_ensemble)
    b = girsanov_weights(small_ensemble, _constant_drift(small_ensemble, 0.5), drift_bound=1.0)
    m = mix_weights(a, b, 0.25)
    assert np.allclose(m.w_flow, 0.75 * a.w_flow + 0.25 * b.w_flow)
    assert m.drift is None
    with pytest.raises(ValueError):
        mix_weights(a, b.project(3), 0.5)


def test_reweighted_marginal_matches_manual(small_ensemble):
    ens = small_ensemble
    w = girsanov_weights(ens, _constant_drift(ens, 0.5), drift_bound=1.0)
    k = 30
    mu = reweighted_marginal(ens, w, k)
    wn = w.normalized(k)
    assert mu.mean()[0] == pytest.approx(float(wn @ ens.states[:, k, 0]), abs=1e-12)
    assert np.all(mu.atoms == ens.states[:, k])
