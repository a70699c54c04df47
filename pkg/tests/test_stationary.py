"""Long-run machinery: drift condition, Cesaro averaging, hitting chain."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from mfg_horizon import make_game
from mfg_horizon.games import Marginal, StationaryParams
from mfg_horizon.oracle import stationary_density_quadrature
from mfg_horizon.stationary import (
    StationaryError,
    centers_of,
    cesaro_operator,
    check_drift_condition,
    cycle_lower_bound,
    doeblin_chain_diagnostic,
    estimate_stationary,
    sample_from_masses,
    tv_noise_band,
    uniform_edges,
)


@pytest.fixture(scope="module")
def ou_spec():
    return make_game("clipped-ou-invariant")


@pytest.fixture(scope="module")
def delta0():
    return Marginal(np.array([[0.0]]))


def test_uniform_edges_and_centers():
    edges = uniform_edges(-2.0, 2.0, 8)
    assert edges.shape == (9,)
    assert edges[0] == -2.0 and edges[-1] == 2.0
    c = centers_of(edges)
    assert np.allclose(np.diff(c), 0.5)
    assert c[0] == pytest.approx(-1.75)


def test_cesaro_exact_on_constants_and_linear(rng):
    masses = rng.random(16)
    masses /= masses.sum()
    flow = np.tile(masses, (11, 1))
    out = cesaro_operator(flow, dt=0.1)
    assert np.allclose(out, masses, atol=1e-15)
    flow2 = rng.random((11, 16))
    a = cesaro_operator(flow + 2.0 * flow2, dt=0.1)
    b = cesaro_operator(flow, dt=0.1) + 2.0 * cesaro_operator(flow2, dt=0.1)
    assert np.allclose(a, b, atol=1e-14)
    # partial horizon picks the prefix
    head = cesaro_operator(flow2, dt=0.1, t_avg=0.5)
    assert np.allclose(head, cesaro_operator(flow2[:6], dt=0.1), atol=1e-15)
    with pytest.raises(ValueError):
        cesaro_operator(flow2, dt=0.1, t_avg=5.0)


def test_drift_condition_passes_for_confined_game(ou_spec):
    rep = check_drift_condition(ou_spec)
    assert rep.passed
    assert rep.witness is None
    assert rep.min_margin >= rep.declared_margin - 1e-9
    assert rep.norm_cap_ok
    assert rep.worst_norm <= ou_spec.stationary.lam_cap + 1e-9


def test_drift_condition_rejects_inflated_margin(ou_spec):
    greedy = dataclasses.replace(
        ou_spec, stationary=StationaryParams(r_inner=2.0, r_outer=3.0,
                                             margin=50.0, lam_cap=ou_spec.stationary.lam_cap))
    rep = check_drift_condition(greedy)
    assert not rep.passed
    assert rep.witness is not None
    x_w, a_w, _ = rep.witness
    assert 2.0 <= abs(x_w) <= 6.0
    assert abs(a_w) <= 1.0


def test_drift_condition_needs_geometry():
    with pytest.raises(StationaryError, match="geometry"):
        check_drift_condition(make_game("constant-reward"))


def test_cycle_lower_bound_arithmetic(ou_spec):
    st = ou_spec.stationary
    expected = (st.r_outer**2 - st.r_inner**2) / (2.0 * st.r_outer * st.lam_cap
                                                  + st.lam_cap**2)
    assert cycle_lower_bound(ou_spec) == pytest.approx(expected, rel=1e-15)
    assert expected > 0


def test_estimate_stationary_matches_quadrature(ou_spec, delta0):
    """Uncontrolled clipped OU: the Cesaro average must land on the density
    solved independently by quadrature of exp(2 integral b)."""
    est = estimate_stationary(ou_spec, delta0, None, t_average=24.0, n_paths=6000,
                              dt=0.04, seed=3)
    assert est.masses.sum() == pytest.approx(1.0, abs=1e-12)
    assert abs(est.mean) < 0.05  # symmetric law
    cl = ou_spec.meta["clip_level"]
    dens = stationary_density_quadrature(lambda x: np.clip(-x, -cl, cl))
    assert est.second_moment == pytest.approx(dens.second_moment, abs=0.05)
    assert len(est.doublings) == 2
    assert est.certificate_error == pytest.approx(est.gamma_hat / 24.0)
    for _, tv in est.doublings:
        assert 0.0 <= tv < 0.2


def test_estimate_stationary_guards_drift(ou_spec, delta0):
    greedy = dataclasses.replace(
        ou_spec, stationary=StationaryParams(r_inner=2.0, r_outer=3.0,
                                             margin=50.0, lam_cap=ou_spec.stationary.lam_cap))
    with pytest.raises(StationaryError, match="drift condition"):
        estimate_stationary(greedy, delta0, None, t_average=4.0, n_paths=100)


def test_sample_from_masses_hits_support():
    edges = uniform_edges(-1.0, 1.0, 4)
    masses = np.array([0.0, 1.0, 0.0, 0.0])
    x = sample_from_masses(edges, masses, 500, seed=8)
    assert np.all((x >= -0.5) & (x <= 0.0))
    again = sample_from_masses(edges, masses, 500, seed=8)
    assert np.array_equal(x, again)
    # mixed masses reproduce proportions
    masses2 = np.array([0.25, 0.25, 0.25, 0.25])
    y = sample_from_masses(edges, masses2, 40000, seed=9)
    hist, _ = np.histogram(y, bins=edges)
    assert np.allclose(hist / 40000, 0.25, atol=0.01)


def test_tv_noise_band_scales_with_paths(rng):
    masses = np.exp(-0.5 * centers_of(uniform_edges(-4, 4, 64)) ** 2)
    masses /= masses.sum()
    small = tv_noise_band(masses, 1000)
    big = tv_noise_band(masses, 16000)
    assert small > big > 0.0
    # multinomial TV floor shrinks like 1/sqrt(n)
    assert small / big == pytest.approx(4.0, rel=0.35)


def test_doeblin_chain_small_budget(ou_spec, delta0):
    rep = doeblin_chain_diagnostic(ou_spec, delta0, n_chains=512, dt=0.01,
                                   t_budget=30.0, seed=2)
    assert not rep.flagged
    assert 0.0 < rep.theta_hat <= 1.0
    assert rep.mean_leg >= rep.xi
    assert rep.leg_ok
    assert rep.n_legs > 0
    # exits skew toward the start side of the well
    assert rep.exit_up_from_plus >= rep.exit_up_from_minus
    assert 0.0 <= rep.exit_up_from_plus <= 1.0
    assert 0.0 <= rep.exit_up_from_minus <= 1.0


def test_doeblin_needs_geometry(delta0):
    with pytest.raises(StationaryError):
        doeblin_chain_diagnostic(make_game("constant-reward"), delta0)
