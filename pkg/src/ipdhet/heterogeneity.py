"""Core heterogeneity quantities shared by the one- and two-stage pipelines.

The inconsistency statistic used throughout is

    I2 = 100 * tau2 / (tau2 + sigma2_avg)

where ``tau2`` is the between-trial variance of the treatment-subgroup
interaction and ``sigma2_avg`` is a weighted average of the within-trial
variances,

    sigma2_avg = (K - 1) / (sum(w) - sum(w^2) / sum(w)),   w_j = 1 / v_j,

with ``v_j`` the within-trial variance of trial j's interaction estimate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import DegenerateWeights, TooFewTrials, ZeroVariance


class Estimand(enum.Enum):
    """Which interaction contrast a model targets.

    FINAL_VISIT: difference in outcome at the last visit (adjusted for baseline).
    RATE: difference in the yearly rate of change across all visits.
    """

    FINAL_VISIT = "final_visit"
    RATE = "rate"

    @property
    def code(self) -> int:
        """Compact 1/2 code used in result files."""
        return 1 if self is Estimand.FINAL_VISIT else 2

    @classmethod
    def from_code(cls, code: int | str) -> "Estimand":
        code = int(code)
        if code == 1:
            return cls.FINAL_VISIT
        if code == 2:
            return cls.RATE
        raise ValueError(f"unknown estimand code {code!r}")


@dataclass
class EffectEstimate:
    """A single trial's interaction estimate from a first-stage fit."""

    trial: int
    estimate: float
    se: float
    converged: bool = True
    iterations: int = 0

    def __post_init__(self) -> None:
        if not np.isfinite(self.estimate) or not np.isfinite(self.se):
            raise ValueError("estimate and se must be finite")
        if self.se < 0:
            raise ValueError(f"se must be >= 0, got {self.se}")

    @property
    def variance(self) -> float:
        return self.se ** 2


@dataclass
class MetaResult:
    """Pooled interaction effect plus heterogeneity quantities for one model."""

    estimand: Estimand
    model: str
    theta: float
    tau2: float
    #: (lower, upper) for tau2, or None when the interval is missing.  The
    #: upper limit alone may be None when the profile search found no crossing.
    tau2_ci: Optional[tuple[float, Optional[float]]]
    sigma2_avg: float
    i2: float
    weights_fixed: np.ndarray
    weights_random: np.ndarray
    converged: bool
    iterations: int
    trial_estimates: Sequence[EffectEstimate] = field(default_factory=tuple)


def fixed_effect_weights(variances: Sequence[float]) -> np.ndarray:
    """Inverse-variance weights ``w_j = 1 / v_j``."""
    v = np.asarray(variances, dtype=float)
    if np.any(~np.isfinite(v)) or np.any(v <= 0):
        raise DegenerateWeights(f"within-trial variances must be positive and finite, got {v}")
    return 1.0 / v


def avg_within_var(weights: Sequence[float]) -> float:
    """Average within-trial variance implied by fixed-effect weights.

    Equal weights collapse this to the common variance ``1 / w``.
    """
    w = np.asarray(weights, dtype=float)
    if w.size < 2:
        raise TooFewTrials(f"need >= 2 weights, got {w.size}")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise DegenerateWeights(f"weights must be positive and finite, got {w}")
    total = w.sum()
    denom = total - (w ** 2).sum() / total
    return float((w.size - 1) / denom)


def i_squared(tau2: float, sigma2_avg: float) -> float:
    """Percentage of total variance due to between-trial heterogeneity.

    ``tau2 = 0`` gives exactly 0 (including the degenerate ``sigma2_avg = 0``
    limit produced by noise-free data); otherwise ``sigma2_avg`` must be
    positive and the result lies in (0, 100).
    """
    if not np.isfinite(tau2) or tau2 < 0:
        raise ValueError(f"tau2 must be finite and >= 0, got {tau2}")
    if tau2 == 0:
        return 0.0
    if not np.isfinite(sigma2_avg) or sigma2_avg < 0:
        raise ValueError(f"sigma2_avg must be finite and >= 0, got {sigma2_avg}")
    if sigma2_avg == 0:
        raise ZeroVariance("sigma2_avg is zero with tau2 > 0")
    return float(100.0 * tau2 / (tau2 + sigma2_avg))
