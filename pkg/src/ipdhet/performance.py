"""Performance summaries over a table of replicate results.

Everything here consumes the long-format replicate table produced by the
harness (one row per scenario / replicate / estimand / model) together with
the closed-form true values, and produces the three derived tables: the main
summary (mean and median I2, mean tau2 and sigma2_avg, with Monte Carlo
standard errors), interval coverage for tau2, and between-model agreement of
I2 on matched replicates.
"""

from __future__ import annotations

from itertools import combinations
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import EmptyCell, MismatchedPairs

#: Columns a replicate table must carry, with the dtype family expected.
REPLICATE_COLUMNS = {
    "scenario_id": "integer",
    "rep": "integer",
    "estimand": "string",
    "model": "string",
    "theta_hat": "float",
    "tau2_hat": "float",
    "tau2_lo": "float",
    "tau2_hi": "float",
    "sigma2_avg": "float",
    "i2": "float",
    "converged": "boolean",
    "iterations": "integer",
}

GROUP_KEYS = ["scenario_id", "estimand", "model"]


def validate_replicates(df: pd.DataFrame) -> pd.DataFrame:
    """Check columns and coerce dtypes; returns a normalized copy."""
    missing = [c for c in REPLICATE_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"replicate table is missing columns: {missing}")
    out = df.copy()
    for col, family in REPLICATE_COLUMNS.items():
        if family == "integer":
            out[col] = out[col].astype(np.int64)
        elif family == "float":
            out[col] = out[col].astype(float)
        elif family == "boolean":
            out[col] = out[col].astype(bool)
        else:
            out[col] = out[col].astype(str)
    dupes = out.duplicated(subset=["scenario_id", "rep", "estimand", "model"])
    if dupes.any():
        raise ValueError(f"replicate table has {int(dupes.sum())} duplicate keys")
    return out


def load_replicates(path) -> pd.DataFrame:
    return validate_replicates(pd.read_csv(path))


def mcse_mean(values: Iterable[float]) -> float:
    """Monte Carlo standard error of a sample mean."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size < 2:
        return float("nan")
    return float(arr.std(ddof=1) / np.sqrt(arr.size))


def _truth_lookup(truths: pd.DataFrame) -> pd.DataFrame:
    cols = ["scenario_id", "estimand", "tau2", "sigma2_avg", "i2"]
    missing = [c for c in cols if c not in truths.columns]
    if missing:
        raise ValueError(f"truth table is missing columns: {missing}")
    out = truths[cols].rename(
        columns={"tau2": "true_tau2", "sigma2_avg": "true_sigma2_avg", "i2": "true_i2"}
    ).copy()
    out["scenario_id"] = out["scenario_id"].astype(np.int64)
    out["estimand"] = out["estimand"].astype(str)
    return out


def summarize(replicates: pd.DataFrame, truths: Optional[pd.DataFrame] = None) -> pd.DataFrame:
    """Per (scenario, estimand, model) summary over converged replicates.

    Non-converged rows count toward ``n_reps`` but are excluded from the
    statistics.  A cell with no converged rows raises :class:`EmptyCell`.
    """
    df = validate_replicates(replicates)
    rows = []
    for key, grp in df.groupby(GROUP_KEYS, sort=True):
        conv = grp[grp["converged"]]
        if len(conv) == 0:
            raise EmptyCell(f"no converged replicates for {dict(zip(GROUP_KEYS, key))}")
        rows.append({
            "scenario_id": key[0],
            "estimand": key[1],
            "model": key[2],
            "n_reps": len(grp),
            "n_converged": len(conv),
            "mean_i2": float(conv["i2"].mean()),
            "median_i2": float(conv["i2"].median()),
            "mcse_i2": mcse_mean(conv["i2"]),
            "mean_tau2": float(conv["tau2_hat"].mean()),
            "mcse_tau2": mcse_mean(conv["tau2_hat"]),
            "mean_sigma2_avg": float(conv["sigma2_avg"].mean()),
            "mcse_sigma2_avg": mcse_mean(conv["sigma2_avg"]),
        })
    out = pd.DataFrame(rows)
    if truths is not None:
        out = out.merge(_truth_lookup(truths), on=["scenario_id", "estimand"], how="left")
        out["bias_i2"] = out["mean_i2"] - out["true_i2"]
    return out


def coverage_table(replicates: pd.DataFrame, truths: pd.DataFrame) -> pd.DataFrame:
    """Coverage of the tau2 interval against the true value.

    An interval counts as missing unless both limits are present; the
    reported ``coverage`` is the covering fraction among complete intervals
    only (NaN when every interval is missing).
    """
    df = validate_replicates(replicates)
    truth = _truth_lookup(truths)
    rows = []
    for key, grp in df.groupby(GROUP_KEYS, sort=True):
        conv = grp[grp["converged"]]
        if len(conv) == 0:
            raise EmptyCell(f"no converged replicates for {dict(zip(GROUP_KEYS, key))}")
        match = truth[
            (truth["scenario_id"] == key[0]) & (truth["estimand"] == key[1])
        ]
        if len(match) != 1:
            raise ValueError(f"expected one truth row for {key[:2]}, got {len(match)}")
        true_tau2 = float(match["true_tau2"].iloc[0])
        lo = conv["tau2_lo"].to_numpy(dtype=float)
        hi = conv["tau2_hi"].to_numpy(dtype=float)
        present = np.isfinite(lo) & np.isfinite(hi)
        covered = present & (lo <= true_tau2) & (true_tau2 <= hi)
        n_present = int(present.sum())
        rows.append({
            "scenario_id": key[0],
            "estimand": key[1],
            "model": key[2],
            "n_reps": len(conv),
            "n_missing": len(conv) - n_present,
            "prop_missing": (len(conv) - n_present) / len(conv),
            "true_tau2": true_tau2,
            "coverage": float(covered.sum() / n_present) if n_present else float("nan"),
        })
    return pd.DataFrame(rows)


def agreement_table(
    replicates: pd.DataFrame,
    pairs: Optional[Sequence[tuple[str, str]]] = None,
) -> pd.DataFrame:
    """Within-replicate I2 differences between model pairs.

    For each (scenario, estimand) and each ordered pair (model_a, model_b),
    differences ``i2_a - i2_b`` are taken over replicates where both models
    converged.  By default every unordered pair present in the table is
    compared, in sorted order.  A pair with no common replicates raises
    :class:`MismatchedPairs`.
    """
    df = validate_replicates(replicates)
    df = df[df["converged"]]
    rows = []
    for key, grp in df.groupby(["scenario_id", "estimand"], sort=True):
        models = sorted(grp["model"].unique())
        wanted = pairs if pairs is not None else list(combinations(models, 2))
        for model_a, model_b in wanted:
            left = grp[grp["model"] == model_a][["rep", "i2"]]
            right = grp[grp["model"] == model_b][["rep", "i2"]]
            merged = left.merge(right, on="rep", suffixes=("_a", "_b"))
            if len(merged) == 0:
                raise MismatchedPairs(
                    f"no common replicates for {model_a!r} vs {model_b!r} "
                    f"in scenario {key[0]} / {key[1]}"
                )
            diff = (merged["i2_a"] - merged["i2_b"]).to_numpy(dtype=float)
            rows.append({
                "scenario_id": key[0],
                "estimand": key[1],
                "model_a": model_a,
                "model_b": model_b,
                "n_pairs": len(diff),
                "mean_diff": float(diff.mean()),
                "median_diff": float(np.median(diff)),
                "min_diff": float(diff.min()),
                "max_diff": float(diff.max()),
            })
    return pd.DataFrame(rows)
