"""Regression with an informatively right-censored covariate.

The package provides the SPIRE estimating equation (semiparametric
efficient, consistent under any working model for the censored covariate),
the complete-case, inverse-probability-weighted, and maximum-likelihood
comparators, a chi-square test for noninformative covariate censoring, and
a reproducible Monte Carlo harness.
"""
from .errors import (ConfigError, DataError, DegenerateWorkingModelError,
                     NumericalError, SingularInformationError, SpireError,
                     TestFitError, ToleranceError)
from .estimators import (A0Cache, A0Solution, EstimationResult, EstimatorKind,
                         build_a0_system, efficient_score, fit,
                         sandwich_covariance, score_cc, score_ipw,
                         score_matrix, score_working, solve_a0)
from .inference import (TestResult, chi_square_statistic, influence_functions,
                        noninformative_test)
from .model import (Dataset, ModelSpec, Observation, OutcomeParams, Term,
                    design_affine, design_matrix, design_row,
                    log_density_outcome, score_outcome)
from .numerics import (QuadratureRule, SolveReport, adaptive_quadrature,
                       fd_jacobian, gauss_hermite, integrate_against_outcome,
                       newton_solve, solve_linear)
from .simulation import (SimulationConfig, SummaryRow, SummaryTable,
                         calibrate_power_mu, controlled_model,
                         generate_controlled, generate_power,
                         generate_realistic, model_for, parse_estimators,
                         realistic_model, rng_for, run_monte_carlo,
                         run_power_study, true_params)
from .working import (DiscreteWorkingModel, Grid, KmConfig,
                      censoring_survival_weight, censoring_weight_fn,
                      discretize_parametric, km_density_on_grid, km_survival,
                      make_grid, uniform_working_model)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
