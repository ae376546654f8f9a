"""Counterfactual performance evaluation of time-to-event prediction models
under sustained treatment strategies, using artificial censoring and inverse
probability weighting on longitudinal observational data."""

from .data import (
    EmptySubsetError,
    LongitudinalData,
    StrategySpec,
    StrategyView,
    adherent_subset,
    always_treated,
    apply_artificial_censoring,
    load_longitudinal_csv,
    never_treated,
    save_longitudinal_csv,
)
from .develop import CloneCensorWeight, MsmIptw, treatment_history_features
from .glm import (
    BinaryRegression,
    ConvergenceError,
    PerfectSeparationError,
    TermSpec,
)
from .metrics import (
    brier_score,
    calibration,
    concordance_index,
    counterfactual_panel,
    cumulative_dynamic_auc,
    standard_panel,
    subset_panel,
)
from .simulate import (
    DgmParams,
    ScenarioConfig,
    dgm_params,
    generate_observational,
    generate_perfect,
    marginal_summary,
    run_scenario,
    simulate_event_time,
)
from .survival import (
    CountingProcessRows,
    WeightedAalen,
    WeightedCoxPH,
    WeightedSurvivalCurve,
    weighted_kaplan_meier,
)
from .weights import (
    combine_weights,
    compute_ipacw,
    compute_stabilized_iptw,
    estimate_standard_censoring,
    fit_treatment_models,
)

__version__ = "0.1.0"

__all__ = [
    "BinaryRegression",
    "CloneCensorWeight",
    "ConvergenceError",
    "CountingProcessRows",
    "DgmParams",
    "EmptySubsetError",
    "LongitudinalData",
    "MsmIptw",
    "PerfectSeparationError",
    "ScenarioConfig",
    "StrategySpec",
    "StrategyView",
    "TermSpec",
    "WeightedAalen",
    "WeightedCoxPH",
    "WeightedSurvivalCurve",
    "adherent_subset",
    "always_treated",
    "apply_artificial_censoring",
    "brier_score",
    "calibration",
    "combine_weights",
    "compute_ipacw",
    "compute_stabilized_iptw",
    "concordance_index",
    "counterfactual_panel",
    "cumulative_dynamic_auc",
    "dgm_params",
    "estimate_standard_censoring",
    "fit_treatment_models",
    "generate_observational",
    "generate_perfect",
    "load_longitudinal_csv",
    "marginal_summary",
    "never_treated",
    "run_scenario",
    "save_longitudinal_csv",
    "simulate_event_time",
    "standard_panel",
    "subset_panel",
    "treatment_history_features",
    "weighted_kaplan_meier",
]
