"""Nearest-neighbor fractional hot-deck imputation with jackknife variance estimation."""

from .core import (
    Frame,
    IngestionError,
    PersonRecord,
    PovertyThresholdTable,
    SampleDesign,
    group_units,
    validate_frame,
)
from .estimators import (
    EstimateReport,
    ReplicationResult,
    emit_report,
    family_alpha,
    linear_total,
    median_variance,
    poverty_count_variance,
    replicate_imputation,
    replicate_incomes,
)
from .impute import DonorAssignment, MetricConfig, ThinNeighborhoodError, find_donors, impute, impute_item
from .raking import ControlMargins, RakingConfig, rake, rake_replicates
from .replicate import (
    ReplicateWeightSet,
    adjust_item,
    build_variance_groups,
    delete_one_replicates,
    jackknife_variance,
    replicate_factors,
    solve_adjustment,
)

__version__ = "0.1.0"
