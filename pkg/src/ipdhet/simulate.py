"""Trial data generation and the closed-form true values it implies.

Datasets mimic a collection of parallel-arm trials with repeated outcome
visits.  Participants are recruited to the active arm with a random size per
trial, each gets a Bernoulli subgroup flag, and the placebo arm duplicates the
active arm's subgroup composition exactly, so treatment and subgroup are
independent by construction.  The outcome follows a linear-in-time model with
a trial-specific random deviation of the treatment-subgroup-time interaction,
a participant random intercept, and i.i.d. residual noise; outcomes are
recorded on a 0.01 grid and the baseline measurement is carried onto every
row as a covariate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .data import IpdDataset
from .exceptions import UnsupportedScenario
from .heterogeneity import Estimand, i_squared
from .numerics import RngStream

#: Smallest arm size kept after the trial-size draw is truncated to an integer.
MIN_ARM_SIZE = 2

#: Between-trial variance of the interaction slope by heterogeneity label.
HET_LEVELS = {"none": 0.0, "low": 0.01, "high": 0.05}


def _round_decimals(unit: float) -> int:
    if unit <= 0:
        raise ValueError("round_unit must be > 0")
    decimals = int(round(-math.log10(unit)))
    if decimals < 0 or abs(unit - 10.0 ** (-decimals)) > 1e-12:
        raise ValueError(f"round_unit must be a power of ten <= 1, got {unit}")
    return decimals


@dataclass(frozen=True)
class ScenarioConfig:
    """Generating parameters for one simulated meta-analysis.

    Defaults correspond to the base setting: five visits half a year apart, a
    0.375 subgroup prevalence, participant-intercept variance 4, unit residual
    variance, and small fixed effects (interaction slope 0.12 per year, time
    trend -0.4 per year, treatment-time effect 0.12 per year).
    """

    n_trials: int
    mean_arm_size: float
    interaction_slope_var: float
    arm_size_sd: float = 10.0
    subgroup_prob: float = 0.375
    participant_var: float = 4.0
    residual_var: float = 1.0
    n_visits: int = 5
    visit_spacing: float = 0.5
    interaction_effect: float = 0.12
    time_effect: float = -0.4
    treatment_time_effect: float = 0.12
    round_unit: float = 0.01

    def __post_init__(self) -> None:
        if self.n_trials < 2:
            raise ValueError(f"need >= 2 trials, got {self.n_trials}")
        if self.mean_arm_size < MIN_ARM_SIZE:
            raise ValueError(f"mean_arm_size must be >= {MIN_ARM_SIZE}")
        if self.arm_size_sd < 0:
            raise ValueError("arm_size_sd must be >= 0")
        if not 0.0 < self.subgroup_prob < 1.0:
            raise ValueError("subgroup_prob must lie in (0, 1)")
        for name in ("interaction_slope_var", "participant_var", "residual_var"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_visits < 2:
            raise ValueError("need >= 2 visits (baseline plus follow-up)")
        if self.visit_spacing <= 0:
            raise ValueError("visit_spacing must be > 0")
        _round_decimals(self.round_unit)  # validates

    @property
    def mean_trial_size(self) -> float:
        """Expected participants per trial (both arms)."""
        return 2.0 * self.mean_arm_size

    @property
    def visit_times(self) -> np.ndarray:
        return self.visit_spacing * np.arange(self.n_visits, dtype=float)

    @property
    def final_time(self) -> float:
        return float(self.visit_spacing * (self.n_visits - 1))


@dataclass(frozen=True)
class ScenarioRow:
    """One entry of the built-in scenario grid."""

    scenario_id: int
    het_label: str
    config: ScenarioConfig


def _build_scenarios() -> dict[int, ScenarioRow]:
    grid = [
        (1, 4, 45.0, "none"), (2, 4, 45.0, "low"), (3, 4, 45.0, "high"),
        (4, 4, 200.0, "none"), (5, 4, 200.0, "low"), (6, 4, 200.0, "high"),
        (7, 16, 45.0, "none"), (8, 16, 45.0, "low"), (9, 16, 45.0, "high"),
        (10, 16, 200.0, "none"), (11, 16, 200.0, "low"), (12, 16, 200.0, "high"),
        (13, 30, 45.0, "high"), (14, 30, 200.0, "high"),
    ]
    rows = {}
    for sid, k, arm, het in grid:
        cfg = ScenarioConfig(
            n_trials=k, mean_arm_size=arm, interaction_slope_var=HET_LEVELS[het],
        )
        rows[sid] = ScenarioRow(scenario_id=sid, het_label=het, config=cfg)
    return rows


SCENARIOS: dict[int, ScenarioRow] = _build_scenarios()


def scenario_config(scenario_id: int) -> ScenarioConfig:
    try:
        return SCENARIOS[int(scenario_id)].config
    except (KeyError, ValueError) as exc:
        raise UnsupportedScenario(f"unknown scenario id {scenario_id!r}") from exc


def allowed_estimands(config: ScenarioConfig) -> tuple[Estimand, ...]:
    """Estimands evaluated for a configuration.

    The rate-of-change estimand is skipped for very large meta-analyses
    (30+ trials), where the repeated-measures models are impractical.
    """
    if config.n_trials >= 30:
        return (Estimand.FINAL_VISIT,)
    return (Estimand.FINAL_VISIT, Estimand.RATE)


@dataclass(frozen=True)
class TrueValues:
    """Closed-form targets implied by a generating configuration."""

    tau2: float
    sigma2_avg: float
    i2: float


@dataclass(frozen=True)
class GenerationLatents:
    """Per-trial latent draws, exposed for diagnostics and moment checks."""

    slopes: np.ndarray      # trial deviations added to the interaction effect
    arm_sizes: np.ndarray   # active-arm sizes after truncation


def generate_arm_sizes(config: ScenarioConfig, rng: RngStream) -> np.ndarray:
    """Active-arm sizes: normal draws truncated to integers, clamped to >= 2."""
    draws = rng.normal(config.mean_arm_size, config.arm_size_sd, config.n_trials)
    sizes = np.trunc(draws).astype(np.int64)
    return np.maximum(sizes, MIN_ARM_SIZE)


def generate_dataset(
    config: ScenarioConfig,
    rng: RngStream,
    with_latents: bool = False,
) -> IpdDataset | tuple[IpdDataset, GenerationLatents]:
    """Draw one meta-analysis dataset.

    Draw order (fixed for reproducibility): trial interaction-slope deviations,
    arm sizes, then per trial the active-arm subgroup flags, participant
    intercepts, and residuals.  Within each trial the placebo arm is an exact
    subgroup-matched duplicate of the active arm; within each (trial, subgroup)
    cell the second half of participants is active, so arm and subgroup are
    exactly balanced.
    """
    k = config.n_trials
    times = config.visit_times
    g = config.n_visits
    decimals = _round_decimals(config.round_unit)

    slopes = np.asarray(rng.normal(0.0, math.sqrt(config.interaction_slope_var), k))
    sizes = generate_arm_sizes(config, rng)

    trial_col, id_col, t_col, a_col, z_col, y_col, y0_col = [], [], [], [], [], [], []
    next_id = 1
    for j in range(k):
        n_active = int(sizes[j])
        zdraw = rng.uniform(size=n_active) < config.subgroup_prob
        n1 = int(np.count_nonzero(zdraw))
        n0 = n_active - n1
        # Placebo duplicates the active arm's subgroup counts; within a
        # subgroup cell the latter half receives active treatment.
        z_part = np.repeat((0, 1), (2 * n0, 2 * n1))
        a_part = np.concatenate([
            np.zeros(n0, dtype=np.int64), np.ones(n0, dtype=np.int64),
            np.zeros(n1, dtype=np.int64), np.ones(n1, dtype=np.int64),
        ])
        n_part = 2 * n_active

        intercepts = np.asarray(rng.normal(0.0, math.sqrt(config.participant_var), n_part))
        noise = np.asarray(rng.normal(0.0, math.sqrt(config.residual_var), (n_part, g)))

        slope_j = config.interaction_effect + slopes[j]
        mean = (
            slope_j * (a_part * z_part)[:, None] * times
            + config.time_effect * times
            + config.treatment_time_effect * a_part[:, None] * times
            + intercepts[:, None]
        )
        y = np.round(mean + noise, decimals)
        y0 = y[:, 0]

        ids = np.arange(next_id, next_id + n_part, dtype=np.int64)
        next_id += n_part
        trial_col.append(np.full(n_part * g, j + 1, dtype=np.int64))
        id_col.append(np.repeat(ids, g))
        t_col.append(np.tile(times, n_part))
        a_col.append(np.repeat(a_part, g))
        z_col.append(np.repeat(z_part, g))
        y_col.append(y.ravel())
        y0_col.append(np.repeat(y0, g))

    ds = IpdDataset(
        trial=np.concatenate(trial_col), id=np.concatenate(id_col),
        t=np.concatenate(t_col), a=np.concatenate(a_col),
        z=np.concatenate(z_col), y=np.concatenate(y_col),
        y0=np.concatenate(y0_col),
    )
    if with_latents:
        return ds, GenerationLatents(slopes=slopes, arm_sizes=sizes)
    return ds


def true_values(config: ScenarioConfig, estimand: Estimand) -> TrueValues:
    """Closed-form tau2, average within-trial variance, and I2.

    Both derivations assume the generator's balanced structure: var(arm) is
    exactly 1/4, var(subgroup) is p(1-p), and visit times are equally
    attended, so var(time) is the population variance of the visit grid.
    """
    if config.residual_var <= 0:
        raise UnsupportedScenario("closed-form truths need residual_var > 0")
    var_a = 0.25
    var_z = config.subgroup_prob * (1.0 - config.subgroup_prob)
    n_bar = config.mean_trial_size

    if estimand is Estimand.FINAL_VISIT:
        # The final-visit contrast scales the slope deviation by the final
        # time, and the baseline-adjusted residual variance is the conditional
        # variance of (intercept + noise) at the final visit given baseline.
        tau2 = config.final_time ** 2 * config.interaction_slope_var
        total = config.participant_var + config.residual_var
        resid = total - config.participant_var ** 2 / total
        sigma2 = resid / (n_bar * var_a * var_z)
    elif estimand is Estimand.RATE:
        var_t = float(config.visit_times.var())
        if var_t <= 0:
            raise UnsupportedScenario("rate estimand needs >= 2 distinct visit times")
        tau2 = config.interaction_slope_var
        sigma2 = config.residual_var / (n_bar * config.n_visits * var_a * var_z * var_t)
    else:  # pragma: no cover - exhaustive over the enum
        raise ValueError(f"unknown estimand {estimand!r}")

    return TrueValues(tau2=tau2, sigma2_avg=sigma2, i2=i_squared(tau2, sigma2))


def with_heterogeneity(config: ScenarioConfig, label_or_value: str | float) -> ScenarioConfig:
    """Copy of ``config`` with the interaction-slope variance replaced."""
    if isinstance(label_or_value, str):
        try:
            value = HET_LEVELS[label_or_value]
        except KeyError as exc:
            raise UnsupportedScenario(f"unknown heterogeneity label {label_or_value!r}") from exc
    else:
        value = float(label_or_value)
    return replace(config, interaction_slope_var=value)


def truth_rows() -> Iterable[dict]:
    """True values for every built-in scenario and its allowed estimands."""
    for sid in sorted(SCENARIOS):
        row = SCENARIOS[sid]
        for estimand in allowed_estimands(row.config):
            tv = true_values(row.config, estimand)
            yield {
                "scenario_id": sid,
                "n_trials": row.config.n_trials,
                "mean_trial_size": row.config.mean_trial_size,
                "heterogeneity": row.het_label,
                "estimand": estimand.code,
                "tau2": tv.tau2,
                "sigma2_avg": tv.sigma2_avg,
                "i2": tv.i2,
            }
