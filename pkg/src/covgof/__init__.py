"""Goodness-of-fit tests for parametric covariance structures in sparse
multivariate longitudinal data.

The package provides the improved univariate covariance test, its
multivariate extension with max and mean-square aggregate statistics, the
parametric bootstrap machinery behind both, and a simulation harness that
reproduces the Type I error and power experiments at desk scale.
"""

from .basis import (
    BSplineBasis,
    CoefSurface,
    GramMatrix,
    build_basis,
    eval_basis,
    eval_surface,
    gram_matrix,
    surface_grid,
)
from .covariance import (
    AltCovariance,
    SmoothedNull,
    fit_alt_covariance,
    psd_truncate,
    smooth_null,
)
from .dataset import (
    DemeanedDataset,
    LongDataset,
    Observation,
    TimeRescale,
    from_rows,
    load_csv,
    rescale_time,
    split_by_outcome,
    to_csv,
)
from .error_variance import (
    ErrorVarianceEstimate,
    estimate_error_variance_naive,
    estimate_error_variance_smooth,
)
from .errors import CovgofError, DataError, EstimationError, InsufficientDataError
from .gof import (
    BonferroniFollowUp,
    MultivariateTestResult,
    TestConfig,
    UnivariateTestResult,
    aggregate_stats,
    hs_distance,
    m_out_of_n_size,
    p_value,
    run_mgfc_test,
    run_univariate_test,
)
from .lmm import (
    NullFitMultivariate,
    NullFitUnivariate,
    eval_cross_cov,
    eval_null_cov,
    fit_null_multivariate,
    fit_null_univariate,
)
from .mean import MeanFit, demean, fit_mean

__version__ = "0.1.0"

__all__ = [
    "AltCovariance",
    "BSplineBasis",
    "BonferroniFollowUp",
    "CoefSurface",
    "CovgofError",
    "DataError",
    "DemeanedDataset",
    "ErrorVarianceEstimate",
    "EstimationError",
    "GramMatrix",
    "InsufficientDataError",
    "LongDataset",
    "MeanFit",
    "MultivariateTestResult",
    "NullFitMultivariate",
    "NullFitUnivariate",
    "Observation",
    "SmoothedNull",
    "TestConfig",
    "TimeRescale",
    "UnivariateTestResult",
    "aggregate_stats",
    "build_basis",
    "demean",
    "estimate_error_variance_naive",
    "estimate_error_variance_smooth",
    "eval_basis",
    "eval_cross_cov",
    "eval_null_cov",
    "eval_surface",
    "fit_alt_covariance",
    "fit_mean",
    "fit_null_multivariate",
    "fit_null_univariate",
    "from_rows",
    "gram_matrix",
    "hs_distance",
    "load_csv",
    "m_out_of_n_size",
    "p_value",
    "psd_truncate",
    "rescale_time",
    "run_mgfc_test",
    "run_univariate_test",
    "smooth_null",
    "split_by_outcome",
    "surface_grid",
    "to_csv",
]
