"""Solver and verification lab for discounted mean field games in the weak
(measure-change) formulation: BSDE control on a frozen driftless ensemble,
Girsanov reweighting, equilibrium fixed points, horizon asymptotics, and
stationary/invariant game construction."""

__version__ = "0.1.0"

from .asymptotics import (epsilon_bound, epsilon_gap, rate_sweep, solve_finite_mfg,
                          strong_concavity_gap_check)
from .bsde import (required_horizon, required_steps, solve_finite_horizon,
                   solve_infinite_horizon, stability_probe, truncation_decay)
from .config import ExperimentConfig, load_config
from .control import (ControlField, FeedbackPolicy, evaluate_reward, extract_optimal_control,
                      fit_feedback, value)
from .equilibrium import (EquilibriumReport, MeanFieldState, equilibrium_gap,
                          fixed_point_map, solve_equilibrium)
from .games import (ActionLaw, ActionSet, Bounds, GameSpec, GameValidationError, InitialLaw,
                    Marginal, StationaryParams, check_monotonicity, check_standing_assumptions,
                    hamiltonian_tilde, maximize_hamiltonian)
from .metrics import (equal_mass_edges, pinsker_tv_bound, relative_entropy_paths,
                      symmetrized_entropy, tv_binned, tv_masses, w1_actions)
from .oracle import (DiscreteGameDef, NonIntegrableDriftError, enumerate_discrete_mfg,
                     stationary_density_quadrature)
from .paths import (DriftBoundError, MeasureWeights, PathEnsemble, enumerate_binomial_ensemble,
                    girsanov_weights, mix_weights, reweighted_marginal, simulate_ensemble,
                    unit_weights)
from .registry import discrete_oracle_def, game_names, make_game
from .runner import RunResult, run_experiment
from .stationary import (DoeblinReport, InvariantReport, StationaryEstimate, StationaryReport,
                         cesaro_operator, check_drift_condition, cycle_lower_bound,
                         doeblin_chain_diagnostic, estimate_stationary, solve_invariant_mfg,
                         solve_stationary_mfg)

__all__ = [name for name in dir() if not name.startswith("_")]
