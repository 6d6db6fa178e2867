import numpy as np
import pytest
from scipy.stats import chi2

from ipdhet.data import IpdDataset
from ipdhet.exceptions import DegenerateWeights, TooFewTrials
from ipdhet.heterogeneity import EffectEstimate, Estimand
from ipdhet.lmm import LOG2PI
from ipdhet.two_stage import (
    MODEL_TWO_STAGE,
    fit_trial_final_visit,
    fit_trial_rate,
    pool_reml,
    profile_ci_tau2,
    run_two_stage,
)


def reference_profile_loglik(theta, v, tau2):
    """Independent write-down of the pooled REML profile likelihood."""
    w = 1.0 / (v + tau2)
    th = np.sum(w * theta) / np.sum(w)
    return -0.5 * (
        (len(theta) - 1) * LOG2PI
        + np.sum(np.log(v + tau2))
        + np.log(np.sum(w))
        + np.sum(w * (theta - th) ** 2)
    )


def grid_argmax_tau2(theta, v, upper):
    """Two-pass grid scan of the profile likelihood at 1e-6 resolution."""
    coarse = np.linspace(0.0, upper, 4001)
    ll = np.array([reference_profile_loglik(theta, v, t) for t in coarse])
    best = coarse[np.argmax(ll)]
    step = coarse[1] - coarse[0]
    fine = np.arange(max(0.0, best - 2 * step), best + 2 * step, 1e-6)
    llf = np.array([reference_profile_loglik(theta, v, t) for t in fine])
    return fine[np.argmax(llf)]


def sample_estimates():
    theta = [0.10, 0.35, -0.05, 0.42, 0.18]
    var = [0.040, 0.060, 0.050, 0.030, 0.080]
    return [EffectEstimate(trial=j + 1, estimate=t, se=np.sqrt(s))
            for j, (t, s) in enumerate(zip(theta, var))]


def test_trial_final_visit_matches_manual_ols(sc3_data):
    trial = int(sc3_data.trial_ids[0])
    sub = sc3_data.for_trial(trial).at_time(sc3_data.final_time)
    X = np.column_stack([
        np.ones(len(sub)), (sub.a * sub.z).astype(float),
        sub.a.astype(float), sub.z.astype(float), sub.y0,
    ])
    beta, *_ = np.linalg.lstsq(X, sub.y, rcond=None)
    resid = sub.y - X @ beta
    sigma2 = resid @ resid / (len(sub) - 5)
    cov = sigma2 * np.linalg.inv(X.T @ X)
    est = fit_trial_final_visit(sc3_data, trial)
    assert est.estimate == pytest.approx(beta[1], rel=1e-9)
    assert est.se == pytest.approx(np.sqrt(cov[1, 1]), rel=1e-9)
    assert est.converged


def test_fit_trial_rate_runs(sc1_data):
    trial = int(sc1_data.trial_ids[0])
    est = fit_trial_rate(sc1_data, trial)
    assert np.isfinite(est.estimate)
    assert est.se > 0
    assert est.iterations >= 1


def test_pool_reml_matches_grid_scan():
    estimates = sample_estimates()
    theta = np.array([e.estimate for e in estimates])
    v = np.array([e.variance for e in estimates])
    pooled = pool_reml(estimates)
    oracle = grid_argmax_tau2(theta, v, upper=1.0)
    assert pooled.tau2 == pytest.approx(oracle, abs=1e-5)
    w = 1.0 / (v + pooled.tau2)
    assert pooled.theta == pytest.approx(np.sum(w * theta) / np.sum(w), rel=1e-12)
    assert pooled.loglik == pytest.approx(
        reference_profile_loglik(theta, v, pooled.tau2), rel=1e-12)


def test_pool_reml_boundary_is_exact_zero():
    estimates = [EffectEstimate(trial=j, estimate=0.2, se=0.3) for j in range(1, 5)]
    pooled = pool_reml(estimates)
    assert pooled.tau2 == 0.0
    assert pooled.theta == pytest.approx(0.2)


def test_pool_reml_needs_two():
    with pytest.raises(TooFewTrials):
        pool_reml(sample_estimates()[:1])


def test_pool_reml_rejects_zero_variance():
    bad = [EffectEstimate(trial=1, estimate=0.1, se=0.0),
           EffectEstimate(trial=2, estimate=0.2, se=0.1)]
    with pytest.raises(DegenerateWeights):
        pool_reml(bad)


def bisect_crossing(f, lo, hi):
    flo = f(lo)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if np.sign(f(mid)) == np.sign(flo):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_profile_ci_matches_grid_scan():
    estimates = sample_estimates()
    theta = np.array([e.estimate for e in estimates])
    v = np.array([e.variance for e in estimates])
    tau2_hat = pool_reml(estimates).tau2
    assert tau2_hat > 0
    drop = 0.5 * chi2.ppf(0.95, df=1)
    cutoff = reference_profile_loglik(theta, v, tau2_hat) - drop

    def excess(t):
        return reference_profile_loglik(theta, v, t) - cutoff

    lo, hi = profile_ci_tau2(estimates, tau2_hat)
    if excess(0.0) >= 0:
        assert lo == 0.0
    else:
        assert lo == pytest.approx(bisect_crossing(excess, 0.0, tau2_hat), abs=1e-4)
    assert hi is not None
    span = 10.0
    assert excess(span) < 0  # crossing bracketed for the oracle
    assert hi == pytest.approx(bisect_crossing(excess, tau2_hat, span), abs=1e-4)
    assert lo <= tau2_hat <= hi


def test_profile_ci_lower_is_zero_for_weak_heterogeneity():
    estimates = [EffectEstimate(trial=j, estimate=t, se=0.5)
                 for j, t in enumerate([0.1, 0.15, 0.12, 0.2], start=1)]
    tau2_hat = pool_reml(estimates).tau2
    lo, hi = profile_ci_tau2(estimates, tau2_hat)
    assert lo == 0.0
    assert hi is not None and hi > tau2_hat


def test_run_two_stage_result_consistency(sc3_data):
    res = run_two_stage(sc3_data, Estimand.FINAL_VISIT)
    k = sc3_data.n_trials
    assert res.model == MODEL_TWO_STAGE
    assert res.estimand is Estimand.FINAL_VISIT
    assert len(res.trial_estimates) == k
    assert res.weights_fixed.shape == (k,)
    assert res.tau2 >= 0
    assert res.sigma2_avg > 0
    assert res.i2 == pytest.approx(100.0 * res.tau2 / (res.tau2 + res.sigma2_avg))
    lo, hi = res.tau2_ci
    assert lo <= res.tau2
    assert hi is None or hi >= res.tau2
    np.testing.assert_allclose(
        res.weights_random, 1.0 / (1.0 / res.weights_fixed + res.tau2))


def test_run_two_stage_rate(sc1_data):
    res = run_two_stage(sc1_data, Estimand.RATE)
    assert res.model == MODEL_TWO_STAGE
    assert np.isfinite(res.theta)
    assert res.iterations >= 1


def test_run_two_stage_drops_unfittable_trial(sc1_saturated):
    with pytest.warns(RuntimeWarning, match="dropped 1 of 4"):
        res = run_two_stage(sc1_saturated, Estimand.FINAL_VISIT)
    # trial 2 is saturated and cannot be fitted; pooling continues over the rest
    assert {e.trial for e in res.trial_estimates} == {1, 3, 4}
    assert res.weights_fixed.shape == (3,)
    assert np.isfinite(res.theta)
    assert res.sigma2_avg > 0


def test_run_two_stage_drops_constant_subgroup_trial(sc1_no_subgroup):
    # the interaction column is identically zero in trial 2, so its
    # first-stage design is rank deficient in the protected column
    with pytest.warns(RuntimeWarning, match="dropped 1 of 4"):
        res = run_two_stage(sc1_no_subgroup, Estimand.FINAL_VISIT)
    assert {e.trial for e in res.trial_estimates} == {1, 3, 4}


def exact_fit_dataset():
    """Noise-free data: every trial regression fits exactly, all se are 0."""
    rows = {k: [] for k in ("trial", "id", "t", "a", "z", "y", "y0")}
    pid = 0
    for j in (1, 2):
        for i in range(8):
            a = i % 2
            z = (i // 2) % 2
            y0 = 1.0 + 0.37 * i + 0.11 * j
            y2 = 1.0 + 0.5 * a * z + 0.2 * a + 0.1 * z + 0.3 * y0
            for t, y in ((0.0, y0), (2.0, y2)):
                rows["trial"].append(j)
                rows["id"].append(pid)
                rows["t"].append(t)
                rows["a"].append(a)
                rows["z"].append(z)
                rows["y"].append(y)
                rows["y0"].append(y0)
            pid += 1
    return IpdDataset(**rows)


def test_degenerate_noise_free_data_collapses():
    res = run_two_stage(exact_fit_dataset(), Estimand.FINAL_VISIT)
    assert res.theta == pytest.approx(0.5, abs=1e-10)
    assert res.tau2 == 0.0
    assert res.tau2_ci == (0.0, 0.0)
    assert res.sigma2_avg == 0.0
    assert res.i2 == 0.0
    assert np.all(np.isnan(res.weights_fixed))
    assert res.converged
