"""One-stage pipeline: a single mixed model across all trials.

The model stratifies every nuisance effect by trial (trial indicators plus
trial-specific covariate slopes), shares the treatment-subgroup interaction
coefficient, and gives that interaction a trial-level random slope whose
variance is the between-trial heterogeneity tau2.  Residual variances are
either trial-specific or common.  Because the model has no trial-level
estimates to average, the within-trial variances entering I2 are
reconstructed from summary quantities:

    v_j = residual_var_j / (n_j * var(treat_j) * var(subgroup_j) [* var(time_j)])

with population-variance divisors, which equals the exact four-cell formula
sigma2_j * (1/n_j00 + 1/n_j01 + 1/n_j10 + 1/n_j11) whenever treatment and
subgroup are independent in trial j (true by construction for generated
data).  The time factor applies to the rate estimand only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .data import IpdDataset
from .exceptions import DegenerateWeights, IndependenceViolated, TooFewTrials, ZeroVariance
from .heterogeneity import Estimand, MetaResult, avg_within_var, fixed_effect_weights, i_squared
from .lmm import LmmFit, LmmSpec, RandomBlock, fit_reml, make_spec, wald_ci_logvariance

MODEL_ONE_STAGE_TRIAL = "one_stage_trial"
MODEL_ONE_STAGE_COMMON = "one_stage_common"

#: Shared interaction coefficient (the pooled effect of interest).
INTERACTION = "treat_subgroup"
#: Trial-level random slope on the interaction; its variance is tau2.
SLOPE_COMPONENT = "interaction_slope"


@dataclass(frozen=True)
class ContrastSummary:
    """Per-trial quantities feeding the within-trial variance formula."""

    trial: int
    n_obs: int
    var_treat: float
    var_subgroup: float
    var_time: Optional[float] = None


@dataclass
class OneStageFit:
    """A fitted one-stage model plus the metadata needed downstream."""

    fit: LmmFit
    estimand: Estimand
    residual_by_trial: bool
    trials: tuple[int, ...]

    @property
    def theta(self) -> float:
        return self.fit.coef(INTERACTION)

    @property
    def tau2(self) -> float:
        return self.fit.varcomps[SLOPE_COMPONENT]

    def residual_by_trial_map(self) -> dict[int, float]:
        """Residual variance per trial (replicated when common)."""
        if self.residual_by_trial:
            return {int(k): v for k, v in self.fit.residual_variances().items()}
        common = self.fit.varcomps["residual"]
        return {t: common for t in self.trials}


def _indicator_columns(values: np.ndarray, levels: np.ndarray) -> list[np.ndarray]:
    return [(values == lev).astype(float) for lev in levels]


def build_design(
    data: IpdDataset,
    estimand: Estimand,
    residual_by_trial: bool,
) -> LmmSpec:
    """Assemble the one-stage model specification.

    Final-visit estimand: final-visit rows only; fixed effects are the shared
    interaction, trial indicators, and trial-specific treatment, subgroup and
    baseline slopes (1 + 4K columns).  Rate estimand: all rows; fixed effects
    are the shared interaction-time product, trial indicators, and
    trial-specific treatment-time, subgroup-time, time, treatment, subgroup
    and treatment-subgroup terms (1 + 7K columns).  Degenerate trial-specific
    columns are dropped; the interaction and the indicators are protected.
    """
    trials = data.trial_ids
    if len(trials) < 2:
        raise TooFewTrials(f"need >= 2 trials, got {len(trials)}")

    if estimand is Estimand.FINAL_VISIT:
        rows = data.at_time(data.final_time)
        a = rows.a.astype(float)
        z = rows.z.astype(float)
        interaction = a * z
        per_trial = [("treat", a), ("subgroup", z), ("baseline", rows.y0)]
    elif estimand is Estimand.RATE:
        rows = data
        a = rows.a.astype(float)
        z = rows.z.astype(float)
        t = rows.t
        interaction = a * z * t
        per_trial = [
            ("treat_time", a * t), ("subgroup_time", z * t), ("time", t),
            ("treat", a), ("subgroup", z), ("treat_subgroup_cell", a * z),
        ]
    else:  # pragma: no cover - exhaustive over the enum
        raise ValueError(f"unknown estimand {estimand!r}")

    indicators = _indicator_columns(rows.trial, trials)
    columns = [interaction]
    names = [INTERACTION]
    for lev, ind in zip(trials, indicators):
        columns.append(ind)
        names.append(f"trial[{lev}]")
    for lev, ind in zip(trials, indicators):
        for base_name, col in per_trial:
            columns.append(col * ind)
            names.append(f"{base_name}[{lev}]")

    X = sp.csc_matrix(np.column_stack(columns))
    blocks = [RandomBlock(SLOPE_COMPONENT, groups=rows.trial, values=interaction)]
    if estimand is Estimand.RATE:
        blocks.append(RandomBlock("participant", groups=rows.id))

    protect = [INTERACTION] + [f"trial[{lev}]" for lev in trials]
    return make_spec(
        rows.y, X, names, blocks=blocks,
        residual_groups=rows.trial if residual_by_trial else None,
        protect=protect,
    )


def contrast_summary(data: IpdDataset, trial: int, estimand: Estimand) -> ContrastSummary:
    """Observation count and population covariate variances for one trial."""
    sub = data.for_trial(trial)
    if estimand is Estimand.FINAL_VISIT:
        sub = sub.at_time(data.final_time)
        var_time = None
    else:
        var_time = float(sub.t.var())
    n = len(sub)
    if n == 0:
        raise ZeroVariance(f"trial {trial} has no rows")
    var_a = float(sub.a.var())
    var_z = float(sub.z.var())
    for label, value in (("treat", var_a), ("subgroup", var_z)):
        if value <= 0:
            raise ZeroVariance(f"trial {trial}: {label} does not vary")
    if var_time is not None and var_time <= 0:
        raise ZeroVariance(f"trial {trial}: time does not vary")
    return ContrastSummary(
        trial=trial, n_obs=n, var_treat=var_a, var_subgroup=var_z, var_time=var_time,
    )


def within_trial_variance(summary: ContrastSummary, residual_var: float) -> float:
    """Within-trial variance of the trial's interaction contrast.

    ``residual_var / (n * var_treat * var_subgroup [* var_time])``; the time
    factor is present exactly when the summary carries one.
    """
    if residual_var < 0 or not np.isfinite(residual_var):
        raise ValueError(f"residual_var must be finite and >= 0, got {residual_var}")
    denom = summary.n_obs * summary.var_treat * summary.var_subgroup
    if summary.var_time is not None:
        denom *= summary.var_time
    if denom <= 0:
        raise ZeroVariance("contrast summary has a non-positive variance product")
    return residual_var / denom


def cell_within_variance(cell_counts, residual_var: float) -> float:
    """Exact within-trial variance from the four treatment-subgroup cells.

    ``cell_counts[a][z]`` holds the count for arm ``a`` and subgroup ``z``.
    Requires exact independence of the two factors (cross-product condition
    on the counts); raises :class:`IndependenceViolated` otherwise.  Under
    that precondition this equals :func:`within_trial_variance` evaluated
    with the cells' implied population variances.
    """
    cells = np.asarray(cell_counts, dtype=float)
    if cells.shape != (2, 2):
        raise ValueError(f"expected 2x2 cell counts, got shape {cells.shape}")
    if residual_var < 0 or not np.isfinite(residual_var):
        raise ValueError(f"residual_var must be finite and >= 0, got {residual_var}")
    if np.any(cells <= 0):
        raise IndependenceViolated("all four cells must be non-empty")
    n = cells.sum()
    row = cells.sum(axis=1)
    col = cells.sum(axis=0)
    expected = np.outer(row, col) / n
    if np.max(np.abs(cells - expected)) > 1e-9:
        raise IndependenceViolated(
            f"cell counts {cells.tolist()} deviate from independence"
        )
    return float(residual_var * np.sum(1.0 / cells))


def fit_one_stage(
    data: IpdDataset,
    estimand: Estimand,
    residual_by_trial: bool = True,
    max_iter: int = 40,
) -> OneStageFit:
    """Fit the one-stage mixed model."""
    spec = build_design(data, estimand, residual_by_trial)
    fit = fit_reml(spec, max_iter=max_iter)
    return OneStageFit(
        fit=fit, estimand=estimand, residual_by_trial=residual_by_trial,
        trials=tuple(int(t) for t in data.trial_ids),
    )


def run_one_stage(
    data: IpdDataset,
    estimand: Estimand,
    residual_by_trial: bool = True,
    max_iter: int = 40,
) -> MetaResult:
    """Full one-stage analysis of one dataset.

    Trials without a usable reconstructed within-trial variance stay in the
    model fit but are excluded from the averaged-variance step with a
    warning.  That covers two boundary cases: a trial-specific residual
    variance of zero (e.g. a saturated minimum-size trial) and a contrast
    variable that is constant within the trial (e.g. no subgroup members
    drawn).  At least two trials with a positive variance are required.
    """
    osf = fit_one_stage(data, estimand, residual_by_trial, max_iter=max_iter)
    resid_map = osf.residual_by_trial_map()
    within = np.full(len(osf.trials), np.nan)
    for i, t in enumerate(osf.trials):
        try:
            s = contrast_summary(data, t, estimand)
        except ZeroVariance:
            continue
        within[i] = within_trial_variance(s, resid_map[t])
    tau2 = osf.tau2
    ci = wald_ci_logvariance(osf.fit, SLOPE_COMPONENT)
    model = MODEL_ONE_STAGE_TRIAL if residual_by_trial else MODEL_ONE_STAGE_COMMON

    k = len(osf.trials)
    usable = np.isfinite(within) & (within > 0.0)
    if not np.any(usable):
        # Noise-free degenerate data: every residual variance snapped to the
        # boundary.  Equal (infinite) weights collapse sigma2_avg to 0.
        return MetaResult(
            estimand=estimand, model=model, theta=osf.theta,
            tau2=tau2, tau2_ci=ci, sigma2_avg=0.0,
            i2=i_squared(tau2, 0.0) if tau2 == 0.0 else 100.0,
            weights_fixed=np.full(k, np.nan), weights_random=np.full(k, np.nan),
            converged=osf.fit.converged, iterations=osf.fit.iterations,
        )
    if not np.all(usable):
        excluded = [t for t, ok in zip(osf.trials, usable) if not ok]
        warnings.warn(
            f"excluded {len(excluded)} of {k} trials without a usable "
            f"within-trial variance from the averaged-variance step: {excluded}",
            RuntimeWarning, stacklevel=2,
        )
        if int(usable.sum()) < 2:
            raise DegenerateWeights(
                "fewer than 2 trials have positive within-trial variance"
            )

    weights_fixed = np.full(k, np.nan)
    weights_fixed[usable] = fixed_effect_weights(within[usable])
    weights_random = np.full(k, np.nan)
    weights_random[usable] = 1.0 / (within[usable] + tau2)
    sigma2 = avg_within_var(weights_fixed[usable])
    return MetaResult(
        estimand=estimand, model=model, theta=osf.theta,
        tau2=tau2, tau2_ci=ci, sigma2_avg=sigma2,
        i2=i_squared(tau2, sigma2),
        weights_fixed=weights_fixed,
        weights_random=weights_random,
        converged=osf.fit.converged, iterations=osf.fit.iterations,
    )
