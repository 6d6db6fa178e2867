"""Two-stage pipeline: per-trial interaction estimates, then REML pooling.

Stage one fits each trial on its own: a baseline-adjusted linear regression
at the final visit for the final-visit estimand, or a participant-intercept
mixed model over all visits for the rate estimand.  Stage two pools the
trial estimates under a normal random-effects model, estimating the
between-trial variance tau2 by restricted maximum likelihood with a
profile-likelihood confidence interval, and summarises inconsistency as I2.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2

LOG2PI = math.log(2.0 * math.pi)

from .data import IpdDataset
from .exceptions import (
    DegenerateWeights,
    NotPositiveDefinite,
    RankDeficient,
    TooFewRows,
    TooFewTrials,
)
from .heterogeneity import (
    EffectEstimate,
    Estimand,
    MetaResult,
    avg_within_var,
    fixed_effect_weights,
    i_squared,
)
from .lmm import RandomBlock, fit_ols, fit_reml, make_spec, prune_collinear
from .numerics import find_root_bisect, minimize_scalar_bounded

MODEL_TWO_STAGE = "two_stage"

#: Interaction coefficient name used across trial designs.
INTERACTION = "treat_subgroup"

#: Numerical floor treated as "all estimates identical" in the degenerate path.
_EQUAL_TOL = 1e-12


@dataclass
class PooledEffect:
    """REML random-effects pooling of trial-level estimates."""

    theta: float
    tau2: float
    loglik: float


def _trial_design_final(sub: IpdDataset) -> tuple[np.ndarray, list[str], np.ndarray]:
    final = sub.at_time(sub.final_time)
    cols = [
        np.ones(len(final)),
        (final.a * final.z).astype(float),
        final.a.astype(float),
        final.z.astype(float),
        final.y0,
    ]
    names = ["const", INTERACTION, "treat", "subgroup", "baseline"]
    return np.column_stack(cols), names, final.y


def fit_trial_final_visit(data: IpdDataset, trial: int) -> EffectEstimate:
    """Final-visit interaction estimate for one trial.

    Ordinary least squares of the final-visit outcome on treatment, subgroup,
    their product, and the baseline outcome.  Degenerate covariate columns
    (for example a constant baseline) are dropped; a collinear interaction
    column raises :class:`RankDeficient`.
    """
    sub = data.for_trial(trial)
    X, names, y = _trial_design_final(sub)
    kept = prune_collinear(X.T @ X, names, protect=("const", INTERACTION))
    ols = fit_ols(X[:, kept], y, names=[names[j] for j in kept])
    return EffectEstimate(
        trial=trial, estimate=ols.coef(INTERACTION), se=ols.coef_se(INTERACTION),
    )


def fit_trial_rate(data: IpdDataset, trial: int, max_iter: int = 40) -> EffectEstimate:
    """Rate-of-change interaction estimate for one trial.

    Mixed model over all visits with fixed effects for treatment, subgroup,
    time, their pairwise products, and the treatment-subgroup-time product
    (the coefficient of interest), plus a participant random intercept.
    """
    sub = data.for_trial(trial)
    a = sub.a.astype(float)
    z = sub.z.astype(float)
    t = sub.t
    cols = [np.ones(len(sub)), a * z * t, a, z, t, a * z, a * t, z * t]
    names = [
        "const", INTERACTION, "treat", "subgroup", "time",
        "treat_x_subgroup", "treat_x_time", "subgroup_x_time",
    ]
    spec = make_spec(
        sub.y, np.column_stack(cols), names,
        blocks=[RandomBlock("participant", groups=sub.id)],
        protect=("const", INTERACTION),
    )
    fit = fit_reml(spec, max_iter=max_iter)
    return EffectEstimate(
        trial=trial, estimate=fit.coef(INTERACTION), se=fit.coef_se(INTERACTION),
        converged=fit.converged, iterations=fit.iterations,
    )


def _profile_loglik(theta_hats: np.ndarray, variances: np.ndarray, tau2: float) -> float:
    """Restricted log-likelihood of the pooling model, profiled over theta."""
    total_var = variances + tau2
    w = 1.0 / total_var
    sw = w.sum()
    theta = float((w * theta_hats).sum() / sw)
    resid = theta_hats - theta
    k = len(theta_hats)
    return -0.5 * (
        (k - 1) * LOG2PI
        + float(np.log(total_var).sum()) + math.log(sw) + float((w * resid * resid).sum())
    )


def pool_reml(estimates: Sequence[EffectEstimate]) -> PooledEffect:
    """REML estimate of the between-trial variance and the pooled effect.

    Maximises the profiled restricted log-likelihood over tau2 >= 0 by
    bounded scalar search, expanding the bracket until the maximiser is
    interior, so a boundary maximum returns exactly 0.
    """
    if len(estimates) < 2:
        raise TooFewTrials(f"pooling needs >= 2 estimates, got {len(estimates)}")
    theta_hats = np.asarray([e.estimate for e in estimates], dtype=float)
    variances = np.asarray([e.variance for e in estimates], dtype=float)
    if np.any(variances <= 0) or np.any(~np.isfinite(variances)):
        raise DegenerateWeights("within-trial variances must be positive and finite")

    hi = max(10.0 * float(variances.max()),
             10.0 * float(theta_hats.var(ddof=1)), 1e-3)
    for _ in range(6):
        tau2 = minimize_scalar_bounded(
            lambda t: -_profile_loglik(theta_hats, variances, t), 0.0, hi, tol=1e-10,
        )
        if tau2 < 0.99 * hi:
            break
        hi *= 10.0
    w = 1.0 / (variances + tau2)
    theta = float((w * theta_hats).sum() / w.sum())
    return PooledEffect(theta=theta, tau2=float(tau2),
                        loglik=_profile_loglik(theta_hats, variances, tau2))


def profile_ci_tau2(
    estimates: Sequence[EffectEstimate],
    tau2_hat: float,
    level: float = 0.95,
) -> tuple[float, Optional[float]]:
    """Profile-likelihood interval for the between-trial variance.

    Limits are where the profiled restricted log-likelihood drops by half the
    chi-square(1) quantile below its maximum.  The lower limit is 0 when the
    likelihood at 0 is above the cutoff.  The upper search is capped at
    ``1e3 * (tau2_hat + sigma2_avg)`` and expanded tenfold up to three times;
    with no crossing the upper limit is None (missing).
    """
    if len(estimates) < 2:
        raise TooFewTrials(f"need >= 2 estimates, got {len(estimates)}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    theta_hats = np.asarray([e.estimate for e in estimates], dtype=float)
    variances = np.asarray([e.variance for e in estimates], dtype=float)
    if np.any(variances <= 0) or np.any(~np.isfinite(variances)):
        raise DegenerateWeights("within-trial variances must be positive and finite")

    drop = 0.5 * float(chi2.ppf(level, df=1))
    cutoff = _profile_loglik(theta_hats, variances, tau2_hat) - drop

    def excess(t: float) -> float:
        return _profile_loglik(theta_hats, variances, t) - cutoff

    if tau2_hat <= 0 or excess(0.0) >= 0.0:
        lo = 0.0
    else:
        lo = find_root_bisect(excess, 0.0, tau2_hat, tol=1e-10)

    sigma2 = avg_within_var(fixed_effect_weights(variances))
    cap = 1e3 * (tau2_hat + sigma2)
    hi: Optional[float] = None
    for _ in range(4):
        if excess(cap) < 0.0:
            hi = find_root_bisect(excess, max(tau2_hat, 0.0), cap, tol=1e-10)
            break
        cap *= 10.0
    return (lo, hi)


def run_two_stage(data: IpdDataset, estimand: Estimand, max_iter: int = 40) -> MetaResult:
    """Full two-stage analysis of one dataset.

    Trials whose first-stage design cannot be fitted (too few participants
    for the trial regression, or an unfixably rank-deficient design) are
    dropped from pooling with a warning; pooling proceeds over the trials
    that did fit, of which at least two are required.
    """
    trials = data.trial_ids
    if len(trials) < 2:
        raise TooFewTrials(f"need >= 2 trials, got {len(trials)}")
    estimates = []
    dropped = []
    for j in trials:
        try:
            if estimand is Estimand.FINAL_VISIT:
                est = fit_trial_final_visit(data, int(j))
            else:
                est = fit_trial_rate(data, int(j), max_iter=max_iter)
        except (RankDeficient, TooFewRows, NotPositiveDefinite):
            dropped.append(int(j))
            continue
        estimates.append(est)
    if dropped:
        warnings.warn(
            f"dropped {len(dropped)} of {len(trials)} trials with unfittable "
            f"first-stage designs from pooling: {dropped}",
            RuntimeWarning, stacklevel=2,
        )
    if len(estimates) < 2:
        raise TooFewTrials(
            f"only {len(estimates)} of {len(trials)} trials could be fitted"
        )
    iterations = max(e.iterations for e in estimates)
    theta_hats = np.asarray([e.estimate for e in estimates])
    variances = np.asarray([e.variance for e in estimates])

    spread = float(theta_hats.max() - theta_hats.min())
    scale = max(1.0, float(np.abs(theta_hats).max()))
    if (
        float(variances.max()) <= (_EQUAL_TOL * scale) ** 2
        and spread <= _EQUAL_TOL * scale
    ):
        # Noise-free degenerate data: equal estimates whose within-trial
        # variance sits at or below float precision carries no statistical
        # information, so the heterogeneity quantities all collapse to 0.
        k = len(estimates)
        return MetaResult(
            estimand=estimand, model=MODEL_TWO_STAGE,
            theta=float(theta_hats[0]), tau2=0.0, tau2_ci=(0.0, 0.0),
            sigma2_avg=0.0, i2=0.0,
            weights_fixed=np.full(k, np.nan), weights_random=np.full(k, np.nan),
            converged=all(e.converged for e in estimates),
            iterations=iterations, trial_estimates=tuple(estimates),
        )

    pooled = pool_reml(estimates)
    ci = profile_ci_tau2(estimates, pooled.tau2)
    weights_fixed = fixed_effect_weights(variances)
    sigma2 = avg_within_var(weights_fixed)
    return MetaResult(
        estimand=estimand, model=MODEL_TWO_STAGE,
        theta=pooled.theta, tau2=pooled.tau2, tau2_ci=ci,
        sigma2_avg=sigma2, i2=i_squared(pooled.tau2, sigma2),
        weights_fixed=weights_fixed,
        weights_random=1.0 / (variances + pooled.tau2),
        converged=all(e.converged for e in estimates),
        iterations=iterations, trial_estimates=tuple(estimates),
    )
