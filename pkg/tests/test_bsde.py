"""Backward value solver: exact discounting, certificates, conditioning."""

from __future__ import annotations

import math

import numpy as np
import pytest

from mfg_horizon import (
    enumerate_binomial_ensemble,
    enumerate_discrete_mfg,
    make_game,
    simulate_ensemble,
)
from mfg_horizon.bsde import (
    TruncationCertificate,
    required_horizon,
    required_steps,
    solve_finite_horizon,
    solve_infinite_horizon,
    stability_probe,
    truncation_decay,
)
from mfg_horizon.games import GameSpec, Marginal
from mfg_horizon.metrics import log_slope
from mfg_horizon.registry import discrete_oracle_def


def _uniform_marginal(ensemble):
    def marginal_at(k: int) -> Marginal:
        return Marginal(ensemble.states[:, k])

    return marginal_at


@pytest.fixture(scope="module")
def const_spec():
    return make_game("constant-reward", reward_value=1.0, lam=0.5)


@pytest.fixture(scope="module")
def const_ensemble(const_spec):
    return simulate_ensemble(const_spec, 400, 12.0, 0.05, seed=7)


def test_constant_reward_closed_form(const_spec, const_ensemble):
    """Exponential step weights integrate a constant with no quadrature error."""
    mu = _uniform_marginal(const_ensemble)
    for conditioning in ("poly", "binned"):
        for t in (2.0, 12.0):
            k = const_ensemble.index_of(t)
            sol = solve_finite_horizon(const_spec, const_ensemble, mu, None, k,
                                       conditioning=conditioning)
            exact = (1.0 - math.exp(-const_spec.lam * t)) / const_spec.lam
            assert sol.value == pytest.approx(exact, abs=1e-13)
            # constant continuation: Y is path-free and Z vanishes to round-off
            assert np.ptp(sol.y[:, 0]) < 1e-12
            assert np.max(np.abs(sol.z)) < 1e-12
            assert sol.clamp_fraction == 0.0


def test_reward_shift_moves_value_exactly(repulsion_spec, small_ensemble):
    """f -> f + c shifts Y_0 by c (1 - e^{-lam T})/lam; argmax is unchanged."""
    shift = 0.3
    base_f1 = repulsion_spec.reward_state
    b = repulsion_spec.bounds

    def shifted_f1(t, k, paths, marginal):
        return base_f1(t, k, paths, marginal) + shift

    shifted = GameSpec(
        name="shifted", dim=repulsion_spec.dim, lam=repulsion_spec.lam,
        actions=repulsion_spec.actions, initial_law=repulsion_spec.initial_law,
        drift=repulsion_spec.drift, vol=repulsion_spec.vol,
        reward_state=shifted_f1, reward_action=repulsion_spec.reward_action,
        bounds=type(b)(drift=b.drift, reward=b.reward + shift, action_lip=b.action_lip,
                       action_norm=b.action_norm, concavity=b.concavity,
                       mono_slack=b.mono_slack),
        time_homogeneous=repulsion_spec.time_homogeneous,
        drift_mu_free=repulsion_spec.drift_mu_free,
    )
    mu = _uniform_marginal(small_ensemble)
    k = small_ensemble.index_of(4.0)
    a = solve_finite_horizon(repulsion_spec, small_ensemble, mu, None, k)
    c = solve_finite_horizon(shifted, small_ensemble, mu, None, k)
    delta = shift * (1.0 - math.exp(-repulsion_spec.lam * 4.0)) / repulsion_spec.lam
    assert np.allclose(c.y[:, 0] - a.y[:, 0], delta, atol=1e-12)
    assert np.array_equal(a.argmax_idx, c.argmax_idx)
    # the projection of a constant shift cancels in the residual up to round-off
    assert np.allclose(a.z, c.z, atol=1e-10)


def test_required_horizon_arithmetic(repulsion_spec):
    tol = 1e-3
    m_over_lam = repulsion_spec.bounds.value_bound(repulsion_spec.lam)
    expected = math.log(2.0 * m_over_lam / tol) / repulsion_spec.lam
    assert required_horizon(repulsion_spec, tol) == pytest.approx(expected, rel=1e-15)
    k = required_steps(repulsion_spec, 0.05, tol)
    assert k - 1 < expected / 0.05 <= k + 1e-9


def test_truncation_certificate_flags():
    cert = TruncationCertificate(t_used=10.0, k_used=200, tol_requested=1e-3,
                                 tail_bound=6e-4)
    assert not cert.ok
    cert2 = TruncationCertificate(t_used=10.0, k_used=200, tol_requested=1e-3,
                                  tail_bound=5e-4)
    assert cert2.ok


def test_infinite_horizon_requires_long_ensemble(const_spec, const_ensemble):
    mu = _uniform_marginal(const_ensemble)
    with pytest.raises(ValueError, match="requires"):
        solve_infinite_horizon(const_spec, const_ensemble, mu, None, tol=1e-6)
    sol, cert = solve_infinite_horizon(const_spec, const_ensemble, mu, None, tol=0.02)
    assert cert.ok
    assert cert.k_used <= const_ensemble.n_steps
    # truncated value sits within the certified tail of the true 1/lam limit
    assert abs(sol.value - 1.0 / const_spec.lam) <= cert.tail_bound + 1e-12


def test_exact_conditioning_matches_enumeration_oracle():
    """Tree solver with exact prefix means reproduces backward induction."""
    spec = make_game("discrete-oracle")
    oracle = enumerate_discrete_mfg(discrete_oracle_def())
    ens = enumerate_binomial_ensemble(spec, 2, 0.5)

    def marginal_at(k: int) -> Marginal:
        pts = np.array([p for p, _ in oracle.marginals[k]])
        ms = np.array([m for _, m in oracle.marginals[k]])
        return Marginal(pts[:, None], ms)

    sol = solve_finite_horizon(spec, ens, marginal_at, None, 2, conditioning="exact")
    assert sol.value == pytest.approx(oracle.dp_value, abs=1e-9)


def test_exact_conditioning_rejects_gaussian(const_spec, const_ensemble):
    mu = _uniform_marginal(const_ensemble)
    with pytest.raises(ValueError, match="binomial"):
        solve_finite_horizon(const_spec, const_ensemble, mu, None, 4, conditioning="exact")
    with pytest.raises(ValueError, match="conditioning"):
        solve_finite_horizon(const_spec, const_ensemble, mu, None, 4, conditioning="spline")
    with pytest.raises(ValueError, match="horizon"):
        solve_finite_horizon(const_spec, const_ensemble, mu, None, 10_000)


def test_poly_degeneracy_recorded_not_fatal():
    """A binomial tree has k + 1 distinct states at step k, so a cubic design
    loses rank on early steps; the SVD cutoff keeps the projection finite."""
    spec = make_game("discrete-oracle")
    ens = enumerate_binomial_ensemble(spec, 3, 0.5)
    mu = _uniform_marginal(ens)
    sol = solve_finite_horizon(spec, ens, mu, None, 3, conditioning="poly", degree=3)
    assert 1 in sol.degenerate_steps and 2 in sol.degenerate_steps
    assert np.all(np.isfinite(sol.y)) and np.all(np.isfinite(sol.z))
    assert sol.degenerate_steps == tuple(sorted(sol.degenerate_steps))


def test_stability_probe_decays(repulsion_spec, small_ensemble):
    """Value gaps shrink as the perturbed population flows approach the target."""
    target = _uniform_marginal(small_ensemble)

    def shifted_flow(eps):
        def marginal_at(k: int) -> Marginal:
            return Marginal(small_ensemble.states[:, k] + eps)

        return marginal_at

    flows = [(shifted_flow(eps), None) for eps in (0.8, 0.4, 0.1)]
    gaps = stability_probe(repulsion_spec, small_ensemble, flows, (target, None),
                           k_t=small_ensemble.index_of(2.0))
    assert gaps[0] > gaps[1] > gaps[2] >= 0.0
    assert gaps[2] < 0.05


def test_truncation_decay_constant_game(const_spec, const_ensemble):
    """For f == 1 the horizon gaps are analytic, so the fitted slope must
    match log_slope applied to the closed-form gaps to round-off."""
    mu = _uniform_marginal(const_ensemble)
    horizons = [2.0, 3.0, 4.0, 5.0]
    dec = truncation_decay(const_spec, const_ensemble, mu, None, horizons, t_ref=12.0)
    lam = const_spec.lam
    analytic = [abs(math.exp(-lam * 12.0) - math.exp(-lam * t)) / lam for t in horizons]
    expected_slope, _ = log_slope(horizons, analytic)
    assert dec.slope == pytest.approx(expected_slope, abs=1e-9)
    assert dec.target_slope == -lam
    assert 0.9 < dec.slope_ratio < 1.2
    for t, v in zip(dec.horizons, dec.values):
        assert v == pytest.approx((1.0 - math.exp(-lam * t)) / lam, abs=1e-13)
