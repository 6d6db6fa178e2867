"""Quantifying between-trial heterogeneity of treatment-subgroup
interactions in individual-participant-data meta-analysis.

The package simulates longitudinal multi-trial datasets, estimates the
treatment-subgroup interaction with two-stage and one-stage mixed-model
pipelines, and summarizes heterogeneity with tau2, the average within-trial
variance, and I2.  See the README for the command-line interface.
"""

from importlib.metadata import PackageNotFoundError, version as _dist_version

try:
    __version__ = _dist_version("ipdhet")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0+unknown"

from .data import IpdDataset, validate_dataset
from .estimators import OneStageInteractionMeta, TwoStageInteractionMeta, as_ipd_dataset
from .exceptions import IpdhetError
from .harness import RunConfig, run, run_replicate, truth_table
from .heterogeneity import (
    EffectEstimate,
    Estimand,
    MetaResult,
    avg_within_var,
    fixed_effect_weights,
    i_squared,
)
from .numerics import RngStream
from .one_stage import cell_within_variance, run_one_stage, within_trial_variance
from .simulate import (
    SCENARIOS,
    ScenarioConfig,
    allowed_estimands,
    generate_dataset,
    scenario_config,
    true_values,
)
from .two_stage import pool_reml, profile_ci_tau2, run_two_stage

__all__ = [
    "__version__",
    "EffectEstimate",
    "Estimand",
    "IpdDataset",
    "IpdhetError",
    "MetaResult",
    "OneStageInteractionMeta",
    "RngStream",
    "RunConfig",
    "SCENARIOS",
    "ScenarioConfig",
    "TwoStageInteractionMeta",
    "allowed_estimands",
    "as_ipd_dataset",
    "avg_within_var",
    "cell_within_variance",
    "fixed_effect_weights",
    "generate_dataset",
    "i_squared",
    "pool_reml",
    "profile_ci_tau2",
    "run",
    "run_one_stage",
    "run_replicate",
    "run_two_stage",
    "scenario_config",
    "true_values",
    "truth_table",
    "validate_dataset",
    "within_trial_variance",
]
