"""Acceptance suite: one test per criterion, one printed verdict line each.

Every test measures first, prints its verdict through `record_acceptance`
(collected into the terminal summary), then asserts. Statistical criteria
compare against the bands the estimators themselves report; deterministic
ones assert at fixed tolerances. Runtime limits are asserted too, with
shared fixture cost counted against every test that uses the fixture.
"""

import math
import time

import numpy as np
import pytest
from conftest import record_acceptance

from mfg_horizon import make_game, simulate_ensemble
from mfg_horizon.asymptotics import epsilon_gap, rate_sweep
from mfg_horizon.bsde import truncation_decay
from mfg_horizon.control import evaluate_reward, value
from mfg_horizon.equilibrium import flow_residual, solve_equilibrium
from mfg_horizon.games import Marginal, check_monotonicity, check_standing_assumptions, maximize_hamiltonian
from mfg_horizon.metrics import log_slope, pinsker_tv_bound, relative_entropy_paths, tv_binned, tv_masses
from mfg_horizon.oracle import enumerate_discrete_mfg, stationary_density_quadrature
from mfg_horizon.paths import enumerate_binomial_ensemble, girsanov_weights
from mfg_horizon.registry import discrete_oracle_def
from mfg_horizon.stationary import estimate_stationary, solve_invariant_mfg


@pytest.fixture(scope="module")
def heavy_equilibrium():
    """Shared N=2e4 repulsion ensemble with its certified infinite-horizon
    equilibrium; build cost is charged to every criterion that uses it."""
    t0 = time.perf_counter()
    spec = make_game("gaussian-repulsion")
    ens = simulate_ensemble(spec, 20000, 18.0, 0.05, seed=303)
    rep = solve_equilibrium(spec, ens, tol=1e-3, tol_fp=5e-3, theta=0.5, max_iter=40, stride=4)
    return spec, ens, rep, time.perf_counter() - t0


def test_criterion_1_discrete_oracle_equivalence():
    """Exact-conditioning solver vs exhaustive enumeration on the 2-step
    binomial game: values, policy, and marginals to 1e-9."""
    t0 = time.perf_counter()
    spec = make_game("discrete-oracle")
    game = discrete_oracle_def()
    oracle = enumerate_discrete_mfg(game)
    ens = enumerate_binomial_ensemble(spec, 2, 0.5)
    # pure best-response iteration lands exactly on the finite tree
    rep = solve_equilibrium(spec, ens, k_t=2, conditioning="exact",
                            tol_fp=1e-10, theta=1.0, max_iter=20)
    rew = evaluate_reward(spec, ens, rep.state.marginal, rep.state.qlaw, rep.control,
                          k_t=2, weights=rep.state.weights)

    dev = max(abs(rep.value - oracle.dp_value), abs(rew.value - oracle.value))
    for k in range(game.n_steps):
        a_solver = rep.control.actions(k)[:, 0]
        a_oracle = np.array([game.actions[j] for j in oracle.policy_scenario_actions[k]])
        dev = max(dev, float(np.abs(a_solver - a_oracle).max()))
    for k in range(game.n_steps + 1):
        merged: dict[float, float] = {}
        for p, m in zip(ens.states[:, k, 0], rep.state.weights.normalized(k)):
            key = round(float(p), 12)
            merged[key] = merged.get(key, 0.0) + float(m)
        for p, m in oracle.marginals[k]:
            dev = max(dev, abs(merged.pop(p, 0.0) - m))
        dev = max(dev, max((abs(v) for v in merged.values()), default=0.0))

    took = time.perf_counter() - t0
    ok = rep.converged and dev <= 1e-9 and took < 5.0
    record_acceptance(f"[1] discrete-oracle equivalence (value/policy/marginals): "
                      f"{'PASS' if ok else 'FAIL'} (max dev {dev:.2e}, {took:.2f}s < 5s)")
    assert rep.converged
    assert dev <= 1e-9
    assert took < 5.0


def test_criterion_2_constant_reward_value():
    """f == 1, lam = 0.5: certified value 2.000 within 1e-3 plus the solver's
    own band at N = 1e4, and discounted martingale-integrand energy < 1e-4."""
    t0 = time.perf_counter()
    spec = make_game("constant-reward", reward_value=1.0, lam=0.5)
    ens = simulate_ensemble(spec, 10000, 18.0, 0.05, seed=2024)
    mu0 = Marginal(ens.states[:, 0])
    est = value(spec, ens, lambda k: mu0, None, tol=1e-3)

    sol = est.solution
    gamma = math.exp(-spec.lam * ens.dt)
    wstep = (1.0 - gamma) / spec.lam
    disc = wstep * gamma ** np.arange(sol.k_t)
    z_energy = float((disc[None, :] * (sol.z[:, :, 0] ** 2)).sum(axis=1).mean())

    took = time.perf_counter() - t0
    v_err = abs(est.value - 2.0)
    ok = v_err <= 1e-3 + est.band and z_energy < 1e-4 and took < 30.0
    record_acceptance(f"[2] constant-reward value 2.000: {'PASS' if ok else 'FAIL'} "
                      f"(|V-2| {v_err:.2e} <= 1e-3+{est.band:.1e}, z energy {z_energy:.1e} < 1e-4, "
                      f"{took:.1f}s < 30s)")
    assert v_err <= 1e-3 + est.band
    assert z_energy < 1e-4
    assert took < 30.0


def test_criterion_3_truncation_decay_rate():
    """log |Y0(T) - Y0(16)| over T in {4,6,8,10} fits a slope within 20% of
    -lam in a frozen repulsion environment (shared paths, near-noiseless)."""
    t0 = time.perf_counter()
    spec = make_game("gaussian-repulsion")
    ens = simulate_ensemble(spec, 4000, 16.0, 0.05, seed=202)
    dec = truncation_decay(spec, ens, lambda k: Marginal(ens.states[:, k]), None,
                           [4.0, 6.0, 8.0, 10.0], 16.0)

    took = time.perf_counter() - t0
    ok = 0.8 <= dec.slope_ratio <= 1.2 and took < 300.0
    record_acceptance(f"[3] truncation decay rate: {'PASS' if ok else 'FAIL'} "
                      f"(slope {dec.slope:.4f} vs -lam {dec.target_slope}, "
                      f"ratio {dec.slope_ratio:.3f} in [0.8, 1.2], {took:.1f}s < 5min)")
    assert 0.8 <= dec.slope_ratio <= 1.2
    assert took < 300.0


def test_criterion_4_epsilon_equilibrium_bound(heavy_equilibrium):
    """Restricted-control gap at T = 10 sits under 2 (M/lam) e^{-lam T}
    ~ 2.695e-2 plus its band; gaps decrease over T up to paired bands."""
    spec, ens, rep, shared = heavy_equilibrium
    t0 = time.perf_counter()
    results = [epsilon_gap(spec, rep, t, seed=17) for t in (4.0, 6.0, 8.0, 10.0)]

    took = time.perf_counter() - t0 + shared
    bound10 = results[-1].bound
    within_all = all(r.within for r in results)
    # the measured gaps sit at the MC noise floor, so monotonicity is
    # asserted up to the paired bands rather than on raw samples
    monotone = all(b.gap <= a.gap + a.band + b.band for a, b in zip(results, results[1:]))
    ok = (within_all and monotone and abs(bound10 - 2.695e-2) < 5e-5
          and rep.converged and took < 600.0)
    gaps = ", ".join(f"T={r.t_horizon:g}: {r.gap:+.1e}<={r.bound:.1e}+{r.band:.1e}" for r in results)
    record_acceptance(f"[4] epsilon-equilibrium bound: {'PASS' if ok else 'FAIL'} "
                      f"({gaps}; monotone-in-bands {monotone}, {took:.0f}s < 10min)")
    assert rep.converged
    assert abs(bound10 - 2.695e-2) < 5e-5
    assert within_all
    assert monotone
    assert took < 600.0


def test_criterion_5_rate_sweep_bounds_and_slope(heavy_equilibrium):
    """Monotone game (slack 0 verified): every measured window distance under
    its closed-form bound plus band, and measured TV log-slope in (T - t)
    within 20% of -lam/2."""
    spec, ens, rep, shared = heavy_equilibrium
    t0 = time.perf_counter()
    gen = np.random.Generator(np.random.Philox(key=np.uint64(99)))
    shape = (ens.n_steps + 1, ens.n_paths)
    pairs = [(np.abs(1.0 + 0.3 * gen.standard_normal(shape)),
              np.abs(1.0 + 0.3 * gen.standard_normal(shape)), None) for _ in range(3)]
    mono = check_monotonicity(spec, ens.states, ens.times, pairs)

    sweep = rate_sweep(spec, ens, [4.0, 6.0, 8.0, 10.0], t_slices=[1.0, 2.0], tol=1e-3,
                       infinite=rep, tol_fp=5e-3, theta=0.5, max_iter=40, stride=4)
    took = time.perf_counter() - t0 + shared

    bounded = all(
        r.entropy_sym <= r.entropy_bound + r.entropy_band
        and r.tv <= r.tv_bound + r.tv_band
        and r.ctrl_dist <= r.ctrl_bound + r.ctrl_band
        and r.w1q <= r.w1q_bound + 1e-9
        and r.converged and r.bounds_apply
        for r in sweep.rows
    )
    lo, hi = -0.30, -0.20  # -lam/2 +- 20%
    slope_ok = lo <= sweep.tv_slope <= hi
    ok = (mono.passed and mono.worst <= 1e-6 and sweep.assumptions_ok and bounded
          and abs(sweep.tv_bound_slope - (-spec.lam / 2.0)) < 1e-9
          and slope_ok and took < 1200.0)
    record_acceptance(f"[5] rate sweep bounds + TV slope: {'PASS' if ok else 'FAIL'} "
                      f"(slack-0 monotone {mono.passed}, all {len(sweep.rows)} rows under bounds: "
                      f"{bounded}; measured TV slope {sweep.tv_slope:.4f} vs required "
                      f"[{lo}, {hi}], bound column slope {sweep.tv_bound_slope:.4f}; "
                      f"{took:.0f}s < 20min)")
    assert mono.passed and mono.worst <= 1e-6
    assert sweep.assumptions_ok
    assert bounded
    assert abs(sweep.tv_bound_slope - (-spec.lam / 2.0)) < 1e-9
    assert took < 1200.0
    # measured TV between finite- and infinite-horizon path laws decays at
    # about e^{-lam (T-t)}, not the bound's e^{-lam (T-t)/2}: the distances
    # land 1-2 orders below their bounds (see the `bounded` assertion), so
    # the bound's rate is not tight on this game and this check fails as
    # long as measurement and bound agree everywhere else
    assert lo <= sweep.tv_slope <= hi, (
        f"measured TV slope {sweep.tv_slope:.4f} outside [{lo}, {hi}]: the measured "
        f"distances decay faster than the certified rate (every row sits below its "
        f"bound), so the rate pinned by this criterion is not attained by the "
        f"measurement it asks for")


def test_criterion_6_uniqueness_two_starts():
    """Monotone game: reference-measure and far-tilted initializations land
    on the same equilibrium within 3 tol_fp in sup-t TV."""
    t0 = time.perf_counter()
    spec = make_game("gaussian-repulsion")
    ens = simulate_ensemble(spec, 6000, 18.0, 0.05, seed=404)
    rep_a = solve_equilibrium(spec, ens, tol=1e-3, tol_fp=5e-3, stride=4, init="driftless")
    rep_b = solve_equilibrium(spec, ens, tol=1e-3, tol_fp=5e-3, stride=4, init="tilted")
    tv, w1 = flow_residual(rep_a.state, rep_b.state)

    took = time.perf_counter() - t0
    ok = rep_a.converged and rep_b.converged and tv <= 3 * 5e-3 and took < 600.0
    record_acceptance(f"[6] uniqueness from two starts: {'PASS' if ok else 'FAIL'} "
                      f"(sup-t TV {tv:.2e} <= {3 * 5e-3}, action W1 {w1:.2e}, "
                      f"{took:.0f}s < 10min)")
    assert rep_a.converged and rep_b.converged
    assert tv <= 3 * 5e-3
    assert took < 600.0


def test_criterion_7_cesaro_stationary_law():
    """Uncontrolled clipped-OU: quadrature oracle first, then the Cesaro
    average matches its second moment within 0.03 and d_TV(D^T, oracle)
    decays at log-log slope -1 +- 0.2 over T in {8, 16, 32, 64}."""
    t0 = time.perf_counter()
    spec = make_game("clipped-ou-invariant")
    dens = stationary_density_quadrature(lambda x: np.clip(-x, -3.0, 3.0))
    delta0 = Marginal(np.array([[0.0]]))
    horizons = [8.0, 16.0, 32.0, 64.0]
    tvs, est = [], None
    # dt small enough that the Euler variance surplus (~dt/4) cannot cancel
    # the 1/T Cesaro transient inside the horizon range
    for t_avg in horizons:
        est = estimate_stationary(spec, delta0, None, t_average=t_avg,
                                  n_paths=40000, dt=0.005, seed=909)
        tvs.append(tv_masses(est.masses, dens.binned_masses(est.edges)))
    slope, _ = log_slope(np.log(horizons), tvs)

    took = time.perf_counter() - t0
    m2_err = abs(est.second_moment - dens.second_moment)
    ok = m2_err <= 0.03 and -1.2 <= slope <= -0.8 and took < 300.0
    record_acceptance(f"[7] Cesaro stationary law: {'PASS' if ok else 'FAIL'} "
                      f"(E[X^2] err {m2_err:.4f} <= 0.03, TV decay slope {slope:.3f} "
                      f"in [-1.2, -0.8], {took:.0f}s < 5min)")
    assert m2_err <= 0.03
    assert -1.2 <= slope <= -0.8
    assert took < 300.0


def test_criterion_8_invariant_game():
    """Symmetric-interaction game: the constructed invariant law stays put
    in TV over [0, 16] up to the histogram noise band and is mirror-symmetric."""
    t0 = time.perf_counter()
    spec = make_game("clipped-ou-invariant")
    rep = solve_invariant_mfg(spec, tol=0.05, t_check=16.0, n_check=40000,
                              mirror_tol=0.03, seed=606, stationary_tol=0.02,
                              max_outer=8, n_bsde=12000, dt_bsde=0.05, tol_bsde=1e-3,
                              n_sim=30000, t_average=64.0, policy_bins=64)

    took = time.perf_counter() - t0
    ok = (rep.invariant_ok and rep.symmetric_ok and not rep.flagged
          and rep.max_tv < 0.05 + rep.noise_band and rep.mirror_tv < 0.03
          and took < 600.0)
    record_acceptance(f"[8] invariant game construction: {'PASS' if ok else 'FAIL'} "
                      f"(max TV {rep.max_tv:.4f} < 0.05+{rep.noise_band:.4f}, "
                      f"mirror TV {rep.mirror_tv:.4f} < 0.03, {took:.0f}s < 10min)")
    assert rep.max_tv < 0.05 + rep.noise_band
    assert rep.mirror_tv < 0.03
    assert rep.invariant_ok and rep.symmetric_ok and not rep.flagged
    assert took < 600.0


def test_criterion_9_property_suite():
    """Weight moments on 100 random drift fields, entropy dual agreement,
    Pinsker dominance on 50 pairs, argmax tie-break determinism, and
    non-anticipativity of every registry game: zero violations."""
    t0 = time.perf_counter()
    spec = make_game("gaussian-repulsion")
    ens = simulate_ensemble(spec, 4000, 2.0, 0.05, seed=1001)
    gen = np.random.Generator(np.random.Philox(key=np.uint64(77077)))
    violations: list[str] = []

    # 100 random step-constant drift fields: mean-one weights, second moment
    # under the exponential envelope, both via diagnostics and a direct
    # 4-sigma CLT check on the sample mean
    fields = []
    for i in range(100):
        beta = gen.uniform(-1.0, 1.0, size=(1, ens.n_steps, 1))
        field = np.broadcast_to(beta, (ens.n_paths, ens.n_steps, 1)).copy()
        fields.append(field)
        w = girsanov_weights(ens, field, 1.0)
        d = w.diagnostics(1.0)
        wk = w.weights()
        clt = abs(float(wk.mean()) - 1.0) <= 4.0 * float(wk.std(ddof=1)) / math.sqrt(wk.size)
        if not (d["mean_ok"] and d["second_ok"] and clt):
            violations.append(f"weights field {i}: {d}")

    # entropy dual estimators agree within their summed bands on 20 pairs
    for i in range(20):
        w_a = girsanov_weights(ens, fields[2 * i], 1.0)
        w_b = girsanov_weights(ens, fields[2 * i + 1], 1.0)
        est = relative_entropy_paths(w_a, w_b)
        if not est.agree:
            violations.append(f"entropy pair {i}: quad {est.quadratic} vs loglik {est.loglik}")

    # Pinsker dominance on 50 constant-drift pairs: terminal-marginal TV is
    # under the empirical path TV by construction (coarsening), and the path
    # TV sits under sqrt(H/2) up to normalization and 3-sigma MC slack
    k_end = ens.n_steps
    t_end = float(ens.times[-1])
    for i in range(50):
        ba, bb = gen.uniform(-1.0, 1.0, size=2)
        w_a = girsanov_weights(ens, np.full((ens.n_paths, k_end, 1), ba), 1.0)
        w_b = girsanov_weights(ens, np.full((ens.n_paths, k_end, 1), bb), 1.0)
        wa, wb = w_a.weights(), w_b.weights()
        path_tv = 0.5 * float(np.abs(wa / wa.sum() - wb / wb.sum()).sum())
        marg_tv = tv_binned(Marginal(ens.states[:, k_end], wa), Marginal(ens.states[:, k_end], wb))
        entropy = 0.5 * (ba - bb) ** 2 * t_end
        bound, _ = pinsker_tv_bound(entropy)
        g = 0.5 * np.abs(wa - wb)
        slack = (3.0 * float(g.std(ddof=1)) / math.sqrt(g.size)
                 + 0.5 * abs(ens.n_paths / wa.sum() - 1.0) + 0.5 * abs(ens.n_paths / wb.sum() - 1.0))
        if marg_tv > path_tv + 1e-12:
            violations.append(f"pinsker pair {i}: marginal TV {marg_tv} > path TV {path_tv}")
        if path_tv > bound + slack:
            violations.append(f"pinsker pair {i}: path TV {path_tv} > {bound} + {slack}")

    # argmax tie-breaks: all-tied tables resolve to the first index, and
    # repeated evaluation is bit-identical
    cspec = make_game("constant-reward")
    cens = simulate_ensemble(cspec, 500, 1.0, 0.05, seed=5)
    mu = Marginal(cens.states[:, 0])
    idx_tie, _ = maximize_hamiltonian(cspec, 0.0, 0, cens.states, mu, np.zeros((500, 1)))
    if idx_tie.any():
        violations.append("tied hamiltonian argmax did not resolve to the first index")
    z = gen.standard_normal((500, 1))
    idx1, v1 = maximize_hamiltonian(cspec, 0.0, 0, cens.states, mu, z)
    idx2, v2 = maximize_hamiltonian(cspec, 0.0, 0, cens.states, mu, z)
    if not (np.array_equal(idx1, idx2) and np.array_equal(v1, v2)):
        violations.append("hamiltonian argmax is not deterministic across calls")

    # structural checks on every registry game, including the future-state
    # perturbation probe for non-anticipativity
    for name in ("constant-reward", "gaussian-repulsion", "clipped-ou-invariant", "discrete-oracle"):
        g = make_game(name)
        e = (enumerate_binomial_ensemble(g, 2, 0.5) if g.noise == "binomial"
             else simulate_ensemble(g, 800, 2.0, 0.05, seed=31))
        ks = sorted({0, e.n_steps // 2, e.n_steps})
        report = check_standing_assumptions(g, e.states, e.times, [Marginal(e.states[:, k]) for k in ks], seed=13)
        bad = [c.name for c in report.checks if c.status == "fail"
               or (c.name == "non_anticipative" and c.status != "pass")]
        if bad:
            violations.append(f"{name}: failed checks {bad}")

    took = time.perf_counter() - t0
    ok = not violations and took < 120.0
    record_acceptance(f"[9] metric/property suite: {'PASS' if ok else 'FAIL'} "
                      f"(100 weight fields, 20 entropy pairs, 50 Pinsker pairs, argmax "
                      f"determinism, 4 games non-anticipative: {len(violations)} violations, "
                      f"{took:.0f}s < 2min)")
    assert not violations, violations
    assert took < 120.0
