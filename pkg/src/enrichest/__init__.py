"""Conditionally unbiased estimation for two-stage adaptive enrichment trials.

The package covers the full workflow: describing the population partition and
design, applying an interim subpopulation selection rule, computing the
pooled MLE and the conditionally unbiased / plug-in estimators for any target
inside the selection, simulating operating characteristics, and verifying the
closed forms against an independent quadrature oracle.
"""

from .errors import (
    ConfigError,
    ConvergenceFailure,
    EmptyCell,
    EmptyTarget,
    EnrichestError,
    InfeasibleAllocation,
    InsufficientData,
    InvalidInterval,
    MissingScenario,
    NoEstimateAfterStop,
    NotIntervalRepresentable,
    RuleConsistencyError,
    ShapeError,
    TargetError,
)
from .estimators import (
    CellSummary,
    EstimateReport,
    TrialData,
    conditional_shift,
    estimate_report,
    estimate_target,
    pice,
    pice_sigma_hat,
    pooled_mle,
    stagewise_mean_diff,
    truncnorm_correction,
    umvcue,
)
from .oracle import (
    QuadratureSpec,
    conditional_mean_quadrature,
    density_normalization_check,
    mc_conditional_bias,
    run_verification,
)
from .population import (
    AllocationTable,
    DesignSpec,
    IndexSet,
    PopulationSpec,
    aggregate_effect,
    allocate,
    combined_prevalence,
    largest_remainder,
    mean_diff_variance,
    stage_ratio,
)
from .rules import (
    D1Rule,
    D2Rule,
    D3Rule,
    ExtendedInterval,
    RuleConfig,
    SelectionOutcome,
    SelectionRule,
    Stage1Summary,
    apply_rule,
    bounds_for_target,
    check_partition_consistency,
    d2_upper_bound,
    get_rule,
    register_rule,
    unregister_rule,
)
from .simulation import (
    CellResult,
    EstimatorStats,
    RngPolicy,
    Scenario,
    ScenarioResult,
    bias_mse_table,
    generate_trial,
    results_to_csv,
    run_scenario,
)

__version__ = "0.1.0"
