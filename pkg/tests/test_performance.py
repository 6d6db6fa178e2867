import numpy as np
import pandas as pd
import pytest

from ipdhet.exceptions import EmptyCell, MismatchedPairs
from ipdhet.performance import (
    agreement_table,
    coverage_table,
    mcse_mean,
    summarize,
    validate_replicates,
)


def make_replicates():
    rows = []
    two = {
        "i2": [10.0, 20.0, 30.0, 40.0],
        "tau2_lo": [0.0, 0.0, np.nan, 0.0],
        "tau2_hi": [0.5, 0.6, np.nan, 1.0],
        "converged": [True, True, True, False],
    }
    one = {
        "i2": [12.0, 18.0, 33.0, 41.0],
        "tau2_lo": [0.1, 0.2, 0.3, 0.26],
        "tau2_hi": [0.3, np.nan, 0.4, 0.5],
        "converged": [True, True, True, True],
    }
    for model, cols in (("two_stage", two), ("one_stage_trial", one)):
        for rep in range(4):
            rows.append({
                "scenario_id": 1, "rep": rep, "estimand": 1, "model": model,
                "theta_hat": 0.2, "tau2_hat": 0.1 * (rep + 1),
                "tau2_lo": cols["tau2_lo"][rep], "tau2_hi": cols["tau2_hi"][rep],
                "sigma2_avg": 0.3, "i2": cols["i2"][rep],
                "converged": cols["converged"][rep], "iterations": 3,
            })
    return pd.DataFrame(rows)


def make_truths():
    return pd.DataFrame([
        {"scenario_id": 1, "estimand": 1, "tau2": 0.25, "sigma2_avg": 0.3, "i2": 45.0},
    ])


def test_mcse_mean():
    assert mcse_mean([1.0, 2.0, 3.0]) == pytest.approx(1.0 / np.sqrt(3))
    assert np.isnan(mcse_mean([1.0]))


def test_validate_rejects_missing_column():
    df = make_replicates().drop(columns=["i2"])
    with pytest.raises(ValueError, match="missing columns"):
        validate_replicates(df)


def test_validate_rejects_duplicate_keys():
    df = make_replicates()
    df = pd.concat([df, df.iloc[[0]]], ignore_index=True)
    with pytest.raises(ValueError, match="duplicate"):
        validate_replicates(df)


def test_summarize_uses_converged_rows_only():
    out = summarize(make_replicates(), make_truths())
    assert len(out) == 2
    two = out[out["model"] == "two_stage"].iloc[0]
    assert two["n_reps"] == 4
    assert two["n_converged"] == 3
    assert two["mean_i2"] == pytest.approx(20.0)
    assert two["median_i2"] == pytest.approx(20.0)
    assert two["mcse_i2"] == pytest.approx(10.0 / np.sqrt(3))
    assert two["true_i2"] == 45.0
    assert two["bias_i2"] == pytest.approx(20.0 - 45.0)
    one = out[out["model"] == "one_stage_trial"].iloc[0]
    assert one["n_converged"] == 4
    assert one["mean_i2"] == pytest.approx(26.0)


def test_summarize_without_truths():
    out = summarize(make_replicates())
    assert "true_i2" not in out.columns
    assert {"mean_tau2", "mcse_tau2"} <= set(out.columns)


def test_summarize_raises_on_empty_cell():
    df = make_replicates()
    df.loc[df["model"] == "two_stage", "converged"] = False
    with pytest.raises(EmptyCell):
        summarize(df, make_truths())


def test_coverage_table():
    out = coverage_table(make_replicates(), make_truths())
    two = out[out["model"] == "two_stage"].iloc[0]
    # one of three converged intervals is missing; the two present both cover
    assert two["n_reps"] == 3
    assert two["n_missing"] == 1
    assert two["prop_missing"] == pytest.approx(1 / 3)
    assert two["coverage"] == pytest.approx(1.0)
    one = out[out["model"] == "one_stage_trial"].iloc[0]
    # an interval with either limit absent is incomplete and sits out
    assert one["n_missing"] == 1
    assert one["prop_missing"] == pytest.approx(1 / 4)
    assert one["coverage"] == pytest.approx(1 / 3)
    assert one["true_tau2"] == 0.25


def test_agreement_table():
    out = agreement_table(make_replicates())
    assert len(out) == 1
    row = out.iloc[0]
    assert (row["model_a"], row["model_b"]) == ("one_stage_trial", "two_stage")
    # reps 0-2 converge in both models; diffs are one_stage - two_stage
    assert row["n_pairs"] == 3
    np.testing.assert_allclose(
        [row["mean_diff"], row["median_diff"], row["min_diff"], row["max_diff"]],
        [1.0, 2.0, -2.0, 3.0])


def test_agreement_explicit_pair_order():
    out = agreement_table(make_replicates(), pairs=[("two_stage", "one_stage_trial")])
    row = out.iloc[0]
    assert row["mean_diff"] == pytest.approx(-1.0)


def test_agreement_mismatched_pairs():
    df = make_replicates()
    df.loc[df["model"] == "two_stage", "converged"] = [True, True, False, False]
    df.loc[df["model"] == "one_stage_trial", "converged"] = [False, False, True, True]
    with pytest.raises(MismatchedPairs):
        agreement_table(df)
