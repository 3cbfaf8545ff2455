"""Causal effect estimation and permutation testing for spatio-temporal
panel data with time-invariant latent confounders.

The package provides a gridded panel container with delimited-text I/O, a
per-location regression estimator of the average causal effect (plus binary,
lagged, observed-confounder and baseline variants), null-preserving
permutation tests with exact finite-sample level, and a seedable Gaussian
random field simulator with closed-form interventional ground truth.
"""

__version__ = "0.1.0"

from .datacube import (CubeSchema, DataCube, GridLayout, Location, grid_layout,
                       read_cube, read_results, transpose_axes, write_cube,
                       write_results)
from .errors import (ConfigError, DataError, EstimationError, IntegrityError,
                     LayoutError, NumericalError, ParseError, ToolkitError)
from .estimators import (BasisSpec, EffectEstimate, LocationFit,
                         estimate_ace, estimate_ace_binary,
                         estimate_ace_observed_confounder, estimate_model1,
                         estimate_model2, fit_location_ols)
from .experiments import (ConsistencyStudySpec, LevelStudyResult,
                          run_consistency_study, run_intervention_check,
                          run_level_study, write_table)
from .resampling import (ExactTestResult, PermutationScheme, Statistic,
                         TestResult, apply_permutation, effect_statistic,
                         enumerate_exact, permutation_pvalues, run_test)
from .simulate import (FORMS, CovarianceModel, GpSampler, GridSampling,
                       LatentFields, LscmSpec, analytic_average_effect,
                       sample_gp, simulate_intervention, simulate_lscm)

__all__ = [
    "__version__",
    # datacube
    "CubeSchema", "DataCube", "GridLayout", "Location", "grid_layout",
    "read_cube", "read_results", "transpose_axes", "write_cube", "write_results",
    # errors
    "ConfigError", "DataError", "EstimationError", "IntegrityError",
    "LayoutError", "NumericalError", "ParseError", "ToolkitError",
    # estimators
    "BasisSpec", "EffectEstimate", "LocationFit", "estimate_ace",
    "estimate_ace_binary", "estimate_ace_observed_confounder",
    "estimate_model1", "estimate_model2", "fit_location_ols",
    # experiments
    "ConsistencyStudySpec", "LevelStudyResult", "run_consistency_study",
    "run_intervention_check", "run_level_study", "write_table",
    # resampling
    "ExactTestResult", "PermutationScheme", "Statistic", "TestResult",
    "apply_permutation", "effect_statistic", "enumerate_exact",
    "permutation_pvalues", "run_test",
    # simulate
    "FORMS", "CovarianceModel", "GpSampler", "GridSampling", "LatentFields",
    "LscmSpec", "analytic_average_effect", "sample_gp",
    "simulate_intervention", "simulate_lscm",
]
