"""Estimation and projection of three-sector supply shares over time.

Bayesian hierarchical penalized B-spline models for compositional
supply-share time series observed through sparse surveys, with an adaptive
MCMC engine, a two-stage cross-method correlation procedure, posterior
summaries, an out-of-sample validation harness, and a pipeline CLI.
"""

from .data_model import (
    CleanDataset,
    GeographyIndex,
    IngestSettings,
    LogitObservation,
    Method,
    ModelInputs,
    Sector,
    SurveyObservation,
    build_model_inputs,
    collapse_duplicates,
    delta_method_var,
    load_geography,
    load_survey_data,
    to_logit_obs,
)
from .errors import (
    ConfigError,
    DegenerateCompositionError,
    EmptySupportError,
    GridMismatchError,
    InsufficientChainsError,
    InsufficientDataError,
    NonConvergenceWarning,
    NumericalError,
    RangeError,
    SchemaError,
    SPDError,
    SupplyShareError,
    TestSetMismatchError,
    UnknownCountryError,
    WindowError,
)
from .model_core import (
    CrossMethod,
    FixedGlobal,
    HierarchyMaps,
    InformativePriors,
    Level,
    ModelSpec,
    ParameterState,
    Scope,
    SectorCovariance,
    ZeroCovariance,
    beta_from,
    build_sector_covs,
    compose_phi,
    latent_psi,
    log_likelihood,
    log_posterior,
    log_prior,
)
from .correlation import (
    DeltaMedians,
    assemble_sigma,
    cross_method_from_medians,
    data_support_mask,
    export_correlations,
    fit_zero_covariance,
    fixed_global_from_medians,
    load_correlations,
    rho_hat,
)
from .plotting import plot_population, save_population_figures
from .posterior_summary import (
    PosteriorSummary,
    export_estimates,
    extract_global_sigma,
    extract_informative_priors,
    load_estimates,
    summarize,
)
from .sampler import (
    ChainOutput,
    SamplerConfig,
    default_monitor,
    diagnostics,
    initial_state,
    run_chains,
    sample_density,
    scalar_diagnostics,
)
from .simulate import SimScenario, simulate_dataset
from .spline_basis import BasisMatrix, build_basis, eval_basis, greville_sites
from .validation import (
    PredictiveChecks,
    ValidationReport,
    compare_models,
    holdout_split,
    mean_error,
    median_abs_error,
    median_agreement,
    metrics,
    predictive_errors,
    rmse,
)

__version__ = "0.1.0"
