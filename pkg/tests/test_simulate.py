import numpy as np
import pytest

from ipdhet.exceptions import UnsupportedScenario
from ipdhet.heterogeneity import Estimand
from ipdhet.numerics import RngStream
from ipdhet.simulate import (
    HET_LEVELS,
    MIN_ARM_SIZE,
    SCENARIOS,
    ScenarioConfig,
    allowed_estimands,
    generate_arm_sizes,
    generate_dataset,
    scenario_config,
    true_values,
    truth_rows,
    with_heterogeneity,
)


def test_scenario_grid_shape():
    assert sorted(SCENARIOS) == list(range(1, 15))
    sizes = {(row.config.n_trials, row.config.mean_arm_size, row.het_label)
             for row in SCENARIOS.values()}
    assert (4, 45.0, "none") in sizes
    assert (16, 200.0, "high") in sizes
    assert (30, 45.0, "high") in sizes
    assert (30, 200.0, "high") in sizes
    # 30-trial scenarios only exist at high heterogeneity
    for row in SCENARIOS.values():
        if row.config.n_trials == 30:
            assert row.het_label == "high"
        assert row.config.interaction_slope_var == HET_LEVELS[row.het_label]


def test_scenario_config_unknown_id():
    with pytest.raises(UnsupportedScenario):
        scenario_config(99)


def test_allowed_estimands_skip_rate_for_large_k():
    assert allowed_estimands(scenario_config(1)) == (Estimand.FINAL_VISIT, Estimand.RATE)
    assert allowed_estimands(scenario_config(13)) == (Estimand.FINAL_VISIT,)
    assert allowed_estimands(scenario_config(14)) == (Estimand.FINAL_VISIT,)


def test_visit_grid():
    cfg = scenario_config(1)
    np.testing.assert_allclose(cfg.visit_times, [0.0, 0.5, 1.0, 1.5, 2.0])
    assert cfg.final_time == 2.0
    assert cfg.mean_trial_size == 90.0


def test_arm_sizes_truncate_and_clamp():
    cfg = ScenarioConfig(n_trials=200, mean_arm_size=3.0, interaction_slope_var=0.0)
    sizes = generate_arm_sizes(cfg, RngStream(seed=5))
    raw = RngStream(seed=5).normal(3.0, 10.0, 200)
    assert sizes.min() == MIN_ARM_SIZE  # sd 10 around 3 guarantees clamped draws
    np.testing.assert_array_equal(sizes, np.maximum(np.trunc(raw), MIN_ARM_SIZE))


def test_generated_dataset_structure(sc3_data):
    ds = sc3_data
    cfg = scenario_config(3)
    assert ds.n_trials == cfg.n_trials
    # five visits per participant on the half-year grid
    ids, counts = np.unique(ds.id, return_counts=True)
    assert np.all(counts == cfg.n_visits)
    for pid in ids[:5]:
        rows = ds.subset(ds.id == pid)
        np.testing.assert_allclose(np.sort(rows.t), cfg.visit_times)
        # y0 replicates the baseline outcome on every row
        base = rows.y[rows.t == 0.0][0]
        assert np.all(rows.y0 == base)
    # outcomes carry at most two decimals
    np.testing.assert_array_equal(ds.y, np.round(ds.y, 2))


def test_generated_dataset_balance(sc3_data):
    ds = sc3_data
    for j in ds.trial_ids:
        sub = ds.for_trial(j).at_time(0.0)
        # equal arms, and within each subgroup equal arms again
        assert sub.a.sum() * 2 == len(sub)
        for zval in (0, 1):
            cell = sub.subset(sub.z == zval)
            if len(cell):
                assert cell.a.sum() * 2 == len(cell)


def test_generate_dataset_deterministic():
    cfg = scenario_config(2)
    a = generate_dataset(cfg, RngStream(seed=3, stream_id=17))
    b = generate_dataset(cfg, RngStream(seed=3, stream_id=17))
    c = generate_dataset(cfg, RngStream(seed=3, stream_id=18))
    assert a.equals(b)
    assert not a.equals(c)


def test_generate_dataset_latents_match_data():
    cfg = scenario_config(3)
    ds, latents = generate_dataset(cfg, RngStream(seed=8), with_latents=True)
    assert latents.slopes.shape == (cfg.n_trials,)
    assert latents.arm_sizes.shape == (cfg.n_trials,)
    for j in ds.trial_ids:
        sub = ds.for_trial(j).at_time(0.0)
        assert len(sub) == 2 * latents.arm_sizes[j - 1]


def test_baseline_variance_moment():
    # var(y0) should be near participant_var + residual_var = 5
    cfg = scenario_config(4)  # 400 per trial, no het
    ds = generate_dataset(cfg, RngStream(seed=21))
    v = ds.at_time(0.0).y0.var()
    assert v == pytest.approx(5.0, rel=0.15)


def test_true_values_final_visit():
    cfg = scenario_config(3)
    tv = true_values(cfg, Estimand.FINAL_VISIT)
    assert tv.tau2 == pytest.approx(cfg.final_time ** 2 * cfg.interaction_slope_var)
    resid = 5.0 - 16.0 / 5.0  # baseline-conditional variance at the final visit
    expected_sigma2 = resid / (90.0 * 0.25 * 0.375 * 0.625)
    assert tv.sigma2_avg == pytest.approx(expected_sigma2, rel=1e-12)
    assert tv.i2 == pytest.approx(100.0 * tv.tau2 / (tv.tau2 + tv.sigma2_avg))


def test_true_values_rate():
    cfg = scenario_config(3)
    tv = true_values(cfg, Estimand.RATE)
    assert tv.tau2 == cfg.interaction_slope_var
    var_t = np.var([0.0, 0.5, 1.0, 1.5, 2.0])
    expected_sigma2 = 1.0 / (90.0 * 5 * 0.25 * 0.375 * 0.625 * var_t)
    assert tv.sigma2_avg == pytest.approx(expected_sigma2, rel=1e-12)


def test_true_values_zero_het_gives_zero_i2():
    tv = true_values(scenario_config(1), Estimand.FINAL_VISIT)
    assert tv.tau2 == 0.0
    assert tv.i2 == 0.0


def test_with_heterogeneity():
    cfg = scenario_config(1)
    assert with_heterogeneity(cfg, "low").interaction_slope_var == 0.01
    assert with_heterogeneity(cfg, 0.3).interaction_slope_var == 0.3
    with pytest.raises(UnsupportedScenario):
        with_heterogeneity(cfg, "extreme")


def test_truth_rows_cover_grid():
    rows = list(truth_rows())
    # 12 scenarios with both estimands, 2 with the final visit only
    assert len(rows) == 12 * 2 + 2
    assert {r["scenario_id"] for r in rows} == set(range(1, 15))
    rate_ids = {r["scenario_id"] for r in rows if r["estimand"] == 2}
    assert 13 not in rate_ids and 14 not in rate_ids


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(n_trials=1, mean_arm_size=10, interaction_slope_var=0.0)
    with pytest.raises(ValueError):
        ScenarioConfig(n_trials=4, mean_arm_size=10, interaction_slope_var=-0.1)
    with pytest.raises(ValueError):
        ScenarioConfig(n_trials=4, mean_arm_size=10, interaction_slope_var=0.0,
                       subgroup_prob=1.0)
    with pytest.raises(ValueError):
        ScenarioConfig(n_trials=4, mean_arm_size=10, interaction_slope_var=0.0,
                       round_unit=0.3)
