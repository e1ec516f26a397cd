"""Depth-based Kolmogorov two-sample tests for ensembles of gridded fields."""
from .core import (
    Ensemble,
    EnsembleFormatError,
    Grid,
    GridMismatchError,
    RegionMask,
    latlon_grid,
    load_ensemble,
    load_field,
    load_region_mask,
    subset_region,
    unit_grid,
    validate_pair,
    whole_domain_mask,
    write_ensemble,
    write_field,
    write_region_mask,
)
from .depth import DepthProfile, PooledRanks, SortedReference, depth_profile, integrated_depth
from .fieldsim import (
    FieldSpec,
    MaternParams,
    build_covariance,
    matern_correlation,
    matern_spec,
    sample_fields,
    sine_mean_field,
    sine_sd_field,
)
from .pipeline import (
    ProxyCatalog,
    ReconstructionSeries,
    ensemble_diagnostics,
    generate_synthetic_series,
    max_r2_map,
    ols_trend,
    run_series_tests,
)
from .twosample import (
    TestResult,
    by_fdr_adjust,
    kd_statistic,
    kd_test,
    kolmogorov_cdf,
    kolmogorov_quantile,
    kolmogorov_sf,
    qi_test,
)

__version__ = "0.1.0"
