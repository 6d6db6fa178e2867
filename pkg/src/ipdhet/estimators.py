"""Scikit-learn style front door for the two analysis pipelines.

Both estimators take longitudinal individual-participant data (an
:class:`~ipdhet.data.IpdDataset`, a pandas DataFrame with the standard
columns, or a mapping of column arrays), fit on call to :meth:`fit`, and
expose the pooled interaction effect and heterogeneity quantities as
fitted attributes.  There is nothing to predict or transform; these are
analysis models, so ``fit`` is the whole protocol.
"""

from __future__ import annotations

from typing import Mapping, Union

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import COLUMNS, IpdDataset, validate_dataset
from .heterogeneity import Estimand, MetaResult
from .one_stage import run_one_stage
from .two_stage import run_two_stage

DataLike = Union[IpdDataset, pd.DataFrame, Mapping[str, "np.ndarray"]]


def as_ipd_dataset(X: DataLike) -> IpdDataset:
    """Coerce supported inputs to a validated :class:`IpdDataset`."""
    if isinstance(X, IpdDataset):
        ds = X
    elif isinstance(X, pd.DataFrame):
        ds = IpdDataset.from_frame(X)
    elif isinstance(X, Mapping):
        missing = [c for c in COLUMNS if c not in X]
        if missing:
            raise ValueError(f"input mapping is missing columns: {missing}")
        ds = IpdDataset(**{c: np.asarray(X[c]) for c in COLUMNS})
    else:
        raise TypeError(
            f"expected IpdDataset, DataFrame, or mapping of columns, got {type(X).__name__}"
        )
    validate_dataset(ds)
    return ds


def _resolve_estimand(value: Union[Estimand, str, int]) -> Estimand:
    if isinstance(value, Estimand):
        return value
    if isinstance(value, str):
        try:
            return Estimand(value.lower())
        except ValueError:
            return Estimand.from_code(value)
    return Estimand.from_code(value)


class _InteractionMetaBase(BaseEstimator):
    """Shared fit protocol; subclasses supply the analysis."""

    def __init__(self, estimand="final_visit", max_iter=40):
        self.estimand = estimand
        self.max_iter = max_iter

    def _analyze(self, data: IpdDataset, estimand: Estimand) -> MetaResult:
        raise NotImplementedError

    def fit(self, X: DataLike, y=None):
        """Run the analysis; ``y`` is ignored (the outcome is a column of X)."""
        data = as_ipd_dataset(X)
        estimand = _resolve_estimand(self.estimand)
        result = self._analyze(data, estimand)
        self.result_ = result
        self.theta_ = result.theta
        self.tau2_ = result.tau2
        self.tau2_ci_ = result.tau2_ci
        self.sigma2_avg_ = result.sigma2_avg
        self.i2_ = result.i2
        self.converged_ = result.converged
        self.n_trials_ = data.n_trials
        return self

    def summary(self) -> dict:
        """Headline results as a plain dict (requires a prior fit)."""
        check_is_fitted(self, "result_")
        return {
            "model": self.result_.model,
            "estimand": self.result_.estimand.value,
            "theta": self.theta_,
            "tau2": self.tau2_,
            "tau2_ci": self.tau2_ci_,
            "sigma2_avg": self.sigma2_avg_,
            "i2": self.i2_,
            "n_trials": self.n_trials_,
            "converged": self.converged_,
        }


class TwoStageInteractionMeta(_InteractionMetaBase):
    """Per-trial regressions pooled by random-effects meta-analysis.

    Parameters
    ----------
    estimand : "final_visit"/"rate" (or 1/2)
        Which interaction contrast to target.
    max_iter : int
        Iteration cap for the per-trial mixed models (rate estimand only).

    Attributes (after fit)
    ----------------------
    theta_, tau2_, tau2_ci_, sigma2_avg_, i2_, converged_, n_trials_, result_
    """

    def _analyze(self, data: IpdDataset, estimand: Estimand) -> MetaResult:
        return run_two_stage(data, estimand, max_iter=self.max_iter)


class OneStageInteractionMeta(_InteractionMetaBase):
    """Single mixed model across trials with a random interaction slope.

    Parameters
    ----------
    estimand : "final_visit"/"rate" (or 1/2)
        Which interaction contrast to target.
    residual_by_trial : bool
        Trial-specific residual variances when True, one shared residual
        variance when False.
    max_iter : int
        Iteration cap for the variance-component search.

    Attributes (after fit)
    ----------------------
    theta_, tau2_, tau2_ci_, sigma2_avg_, i2_, converged_, n_trials_, result_
    """

    def __init__(self, estimand="final_visit", residual_by_trial=True, max_iter=40):
        super().__init__(estimand=estimand, max_iter=max_iter)
        self.residual_by_trial = residual_by_trial

    def _analyze(self, data: IpdDataset, estimand: Estimand) -> MetaResult:
        return run_one_stage(
            data, estimand, residual_by_trial=self.residual_by_trial,
            max_iter=self.max_iter,
        )
