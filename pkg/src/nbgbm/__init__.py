"""Negative-binomial generalized bilinear models.

Fitting (bounded regularized Fisher scoring with likelihood-preserving
projections), approximate standard errors (conditional Fisher inverses,
joint constraint-augmented latent uncertainty, delta propagation), a
simulation harness for calibration studies, and weighted signal metrics.
"""

from .estimation import (
    FitResult,
    bias_correct_dispersions,
    bounded_fisher_step,
    fit,
    initial_params,
    prepare_covariates,
    standardize_covariates,
)
from .inference import (
    InferenceResult,
    full_fisher_variances,
    joint_uv_uncertainty,
    standard_errors,
    wald_tests,
)
from .metrics import WeightedSeries, lrse, weighted_moving_average, wmad
from .model import (
    CovariateSet,
    DataMatrix,
    FitConfig,
    GbmParams,
    PriorConfig,
    check_constraints,
    linear_predictor,
    partial_residuals,
    residual_precisions,
    residuals,
    sum_of_squares_decomposition,
)
from .simulate import (
    SimScheme,
    SimTruth,
    align_latent_factors,
    coverage_curve,
    generate_covariates,
    generate_outcomes,
    generate_parameters,
    relative_mse,
    simulate_dataset,
)

__version__ = "0.1.0"
