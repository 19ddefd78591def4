"""Cross-fitting and the PLR / IRM score estimators."""

import math

import numpy as np
import pytest
from scipy.stats import norm

from dmllab.core import Dataset, FoldPartition, ModelKind, RngStream, Scheme, make_kfold
from dmllab.dml import (NuisancePredictions, cross_fit_nuisances, irm_ate_estimate, make_partition,
                        nuisance_quality, plr_estimate, run_dml, studentized_value)
from dmllab.errors import (DegenerateDesignError, FoldDegenerateError, InvalidArgumentError,
                           InvalidModelError)
from dmllab.learners import LearnerConfig, Task
from dmllab.tuning import SearchSpace, fixed_outcome


def _plr(d, y, m_hat, ell_hat, x=None):
    n = len(d)
    data = Dataset.from_arrays(y, d, x if x is not None else np.zeros((n, 1)), "continuous")
    nuis = NuisancePredictions(ModelKind.PLR, np.asarray(m_hat, float), np.zeros(n, np.int64),
                               ell_hat=np.asarray(ell_hat, float))
    return data, nuis


def _irm(d, y, m_hat, g0, g1, fold_of=None):
    n = len(d)
    data = Dataset.from_arrays(y, d, np.zeros((n, 1)), "binary")
    nuis = NuisancePredictions(ModelKind.IRM, np.asarray(m_hat, float),
                               np.zeros(n, np.int64) if fold_of is None else fold_of,
                               g0_hat=np.asarray(g0, float), g1_hat=np.asarray(g1, float))
    return data, nuis


# =============================================================================
# PLR
# =============================================================================

def test_plr_residual_example():
    data, nuis = _plr([1.0, -1.0, 2.0], [2.0, -2.0, 4.0], [0, 0, 0], [0, 0, 0])
    assert plr_estimate(data, nuis).theta_hat == 2.0


def test_plr_noiseless_oracle():
    gen = np.random.default_rng(0)
    x = gen.normal(size=(50, 2))
    m0 = x[:, 0]
    d = m0 + gen.normal(size=50)
    for theta0 in (-1.3, 0.0, 0.5, 7.0):
        y = theta0 * d + np.cos(x[:, 1])
        ell0 = theta0 * m0 + np.cos(x[:, 1])
        data, nuis = _plr(d, y, m0, ell0, x)
        assert abs(plr_estimate(data, nuis).theta_hat - theta0) < 1e-12


def test_plr_matches_no_intercept_ols():
    gen = np.random.default_rng(1)
    for _ in range(50):
        n = int(gen.integers(5, 200))
        d, y = gen.normal(size=n), gen.normal(size=n)
        m_hat, ell_hat = gen.normal(size=n), gen.normal(size=n)
        data, nuis = _plr(d, y, m_hat, ell_hat)
        v, u = d - m_hat, y - ell_hat
        slope = np.linalg.lstsq(v[:, None], u, rcond=None)[0][0]
        assert abs(plr_estimate(data, nuis).theta_hat - slope) <= 1e-12 * max(1.0, abs(slope))


def test_plr_equivariance():
    gen = np.random.default_rng(2)
    # dyadic values keep the shifted arithmetic exact
    d = np.round(gen.normal(size=40) * 64) / 64
    y = np.round(gen.normal(size=40) * 64) / 64
    m_hat = np.round(gen.normal(size=40) * 64) / 64
    ell_hat = np.round(gen.normal(size=40) * 64) / 64
    base = plr_estimate(*_plr(d, y, m_hat, ell_hat)).theta_hat
    shifted = plr_estimate(*_plr(d, y + 3.0, m_hat, ell_hat + 3.0)).theta_hat
    assert shifted == base
    scaled = plr_estimate(*_plr(d, 4.0 * y, m_hat, 4.0 * ell_hat)).theta_hat
    assert scaled == 4.0 * base
    y2, l2 = gen.normal(size=40), gen.normal(size=40)
    a = plr_estimate(*_plr(d, y2, m_hat, l2)).theta_hat
    b = plr_estimate(*_plr(d, y2 + 1.7, m_hat, l2 + 1.7)).theta_hat
    assert abs(a - b) <= 1e-12


def test_plr_degenerate_design():
    d = np.array([0.5, 1.5, -0.2])
    with pytest.raises(DegenerateDesignError):
        plr_estimate(*_plr(d, [1.0, 2.0, 3.0], d, [0, 0, 0]))


# =============================================================================
# IRM
# =============================================================================

def test_irm_hand_example():
    data, nuis = _irm([1.0, 0.0], [3.0, 1.0], [0.5, 0.5], [1.0, 1.0], [2.0, 2.0])
    est = irm_ate_estimate(data, nuis)
    assert est.theta_hat == 2.0
    assert list(est.scores.psi_b) == [3.0, 1.0]


def test_irm_double_robust_degenerate():
    gen = np.random.default_rng(3)
    n = 60
    d = np.tile([0.0, 1.0], n // 2)
    base = gen.normal(size=n)
    tau = 1.75
    y = base + tau * d
    m_hat = gen.uniform(0.1, 0.9, size=n)
    est = irm_ate_estimate(*_irm(d, y, m_hat, base, base + tau))
    assert abs(est.theta_hat - tau) < 1e-12


def test_irm_randomized_constant_g_closed_form():
    gen = np.random.default_rng(4)
    d = (gen.random(100) < 0.5).astype(float)
    y = gen.normal(size=100) + d
    est = irm_ate_estimate(*_irm(d, y, np.full(100, 0.5), np.zeros(100), np.zeros(100)))
    assert abs(est.theta_hat - (2 * np.mean(d * y) - 2 * np.mean((1 - d) * y))) < 1e-12


def test_irm_rejects_continuous_treatment():
    data = Dataset.from_arrays([1.0, 2.0, 3.0], [0.2, 0.5, 0.9], np.zeros((3, 1)))
    nuis = NuisancePredictions(ModelKind.IRM, np.full(3, 0.5), np.zeros(3, np.int64),
                               g0_hat=np.zeros(3), g1_hat=np.zeros(3))
    with pytest.raises(InvalidModelError):
        irm_ate_estimate(data, nuis)


# =============================================================================
# SCORES, VARIANCE AND INTERVALS
# =============================================================================

def test_score_mean_zero_and_interval_width():
    gen = np.random.default_rng(5)
    z = norm.ppf(0.975)
    for _ in range(30):
        n = int(gen.integers(4, 300))
        d_c = gen.normal(size=n)
        est = plr_estimate(*_plr(d_c, gen.normal(size=n) * 5, gen.normal(size=n),
                                 gen.normal(size=n)))
        d_b = np.concatenate([[0.0, 1.0], (gen.random(n - 2) < 0.4).astype(float)])
        est2 = irm_ate_estimate(*_irm(d_b, gen.normal(size=n), gen.uniform(0.05, 0.95, n),
                                      gen.normal(size=n), gen.normal(size=n)))
        for e in (est, est2):
            assert abs(np.mean(e.scores.psi)) <= 1e-8
            assert abs((e.ci_high - e.ci_low) - 2 * z * e.std_error) <= 1e-12 * max(1, e.std_error)
            var = np.mean(e.scores.psi ** 2) / e.scores.j_hat ** 2
            assert abs(e.std_error - math.sqrt(var / n)) <= 1e-12 * max(1, e.std_error)


def test_irm_jacobian_is_minus_one():
    est = irm_ate_estimate(*_irm([1.0, 0.0, 1.0], [1.0, 0.0, 2.0], [0.5] * 3, [0.0] * 3,
                                 [1.0] * 3))
    assert est.scores.j_hat == -1.0


def test_per_fold_aggregation_averages_fold_estimates():
    gen = np.random.default_rng(6)
    n = 40
    d, y = gen.normal(size=n), gen.normal(size=n)
    m_hat, ell_hat = gen.normal(size=n), gen.normal(size=n)
    fold_of = np.arange(n) % 4
    data = Dataset.from_arrays(y, d, np.zeros((n, 1)))
    nuis = NuisancePredictions(ModelKind.PLR, m_hat, fold_of, ell_hat=ell_hat)
    v, u = d - m_hat, y - ell_hat
    expect = np.mean([np.sum(v[fold_of == k] * u[fold_of == k]) / np.sum(v[fold_of == k] ** 2)
                      for k in range(4)])
    assert abs(plr_estimate(data, nuis, aggregation="per_fold").theta_hat - expect) < 1e-12
    with pytest.raises(InvalidArgumentError):
        plr_estimate(data, nuis, aggregation="median")


def test_studentized_value():
    est = plr_estimate(*_plr([1.0, -1.0, 2.0], [2.0, -2.0, 4.5], [0, 0, 0], [0, 0, 0]))
    assert studentized_value(est, est.theta_hat) == 0.0
    assert abs(studentized_value(est, est.theta_hat - 2 * est.std_error) - 2.0) < 1e-12


# =============================================================================
# NUISANCE QUALITY
# =============================================================================

def test_combined_loss_examples():
    d = np.array([1.0, -1.0, 1.0, -1.0])
    y = np.array([2.0, 0.0, 3.0, 1.0])
    data, nuis = _plr(d, y, d - np.array([0.5, -0.5, 0.5, -0.5]), y - np.array([1, -1, -1, 1]))
    q = nuisance_quality(data, nuis, 0.0)
    assert abs(q.rmse_m - 0.5) < 1e-15 and abs(q.rmse_ell - 1.0) < 1e-15
    assert abs(q.combined_loss - 0.75) < 1e-15
    assert math.isnan(q.rmse_g)

    d = np.array([1.0, 0.0, 1.0, 0.0])
    y = np.array([5.0, 1.0, 0.0, 2.0])
    m_hat = np.array([0.6, 0.4, 0.6, 0.4])
    g = y - np.array([2.0, -2.0, -2.0, 2.0])
    data, nuis = _irm(d, y, m_hat, g, g)
    q = nuisance_quality(data, nuis, 0.0)
    assert abs(q.combined_loss - 0.8) < 1e-12
    assert abs(q.predictive_loss_y - 4.0) < 1e-12


def test_plr_predictive_loss_uses_theta():
    d = np.array([1.0, 2.0, 3.0])
    y = np.array([2.0, 4.0, 7.0])
    data, nuis = _plr(d, y, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
    q = nuisance_quality(data, nuis, 2.0)
    assert abs(q.predictive_loss_y - 0.0) < 1e-15


def test_perfect_nuisances_zero_loss():
    d = np.array([1.0, 0.0, 1.0])
    y = np.array([2.0, 1.0, 2.0])
    data, nuis = _irm(d, y, d, [1.0, 1.0, 1.0], [2.0, 2.0, 2.0])
    assert nuisance_quality(data, nuis, 1.0).combined_loss == 0.0


# =============================================================================
# CROSS-FITTING
# =============================================================================

def _fixed(cfg_ell, cfg_m, k, model=ModelKind.PLR):
    names = ("ell", "m") if model is ModelKind.PLR else ("g", "m")
    return fixed_outcome(dict(zip(names, (cfg_ell, cfg_m))), model, k)


def test_two_fold_mean_predictor():
    gen = np.random.default_rng(7)
    n = 20
    data = Dataset.from_arrays(gen.normal(size=n), gen.normal(size=n), gen.normal(size=(n, 2)))
    part = make_kfold(n, 2, RngStream(1))
    mean = LearnerConfig("mean")
    nuis = cross_fit_nuisances(data, _fixed(mean, mean, 2), ModelKind.PLR, part)
    for k in range(2):
        other = part.folds[1 - k]
        assert np.allclose(nuis.ell_hat[part.folds[k]], data.y[other].mean(), atol=1e-15)
        assert np.allclose(nuis.m_hat[part.folds[k]], data.d[other].mean(), atol=1e-15)
    assert np.array_equal(nuis.fold_of, part.fold_of())


def test_irm_propensity_clip():
    n = 2000
    d = np.zeros(n)
    d[[0, 1]] = 1.0
    data = Dataset.from_arrays(np.arange(n, dtype=float), d, np.zeros((n, 1)))
    part = make_partition(data, ModelKind.IRM, 2, RngStream(0))
    mean = LearnerConfig("mean")
    nuis = cross_fit_nuisances(data, _fixed(mean, LearnerConfig("mean", {}, Task.PROBABILITY), 2,
                                            ModelKind.IRM), ModelKind.IRM, part, clip=0.01)
    assert np.all(nuis.m_hat == 0.01)


def test_fold_without_treatment_class_names_fold():
    data = Dataset.from_arrays([1.0, 2.0, 3.0, 4.0], [1.0, 0.0, 0.0, 0.0], np.zeros((4, 1)))
    part = FoldPartition((np.array([0]), np.array([1, 2, 3])), n=4)
    out = _fixed(LearnerConfig("mean"), LearnerConfig("mean", {}, Task.PROBABILITY), 2,
                 ModelKind.IRM)
    with pytest.raises(FoldDegenerateError) as info:
        cross_fit_nuisances(data, out, ModelKind.IRM, part)
    assert info.value.fold == 0


def test_out_of_fold_purity():
    gen = np.random.default_rng(8)
    n = 30
    x = gen.normal(size=(n, 3))
    y = x[:, 0] + gen.normal(size=n)
    d = x[:, 1] + gen.normal(size=n)
    part = make_kfold(n, 5, RngStream(2))
    out = _fixed(LearnerConfig("tree", {"max_depth": 3}), LearnerConfig("ols"), 5)
    base = cross_fit_nuisances(Dataset.from_arrays(y, d, x), out, ModelKind.PLR, part)
    for i in range(n):
        y2 = y.copy()
        y2[i] += 100.0
        pert = cross_fit_nuisances(Dataset.from_arrays(y2, d, x), out, ModelKind.PLR, part)
        assert pert.ell_hat[i] == base.ell_hat[i]


def test_plr_binary_treatment_is_not_clipped():
    n = 2000
    d = np.zeros(n)
    d[[0, 1]] = 1.0
    data = Dataset.from_arrays(np.arange(n, dtype=float), d, np.zeros((n, 1)))
    part = make_kfold(n, 2, RngStream(0))
    out = _fixed(LearnerConfig("mean"), LearnerConfig("mean", {}, Task.PROBABILITY), 2)
    nuis = cross_fit_nuisances(data, out, ModelKind.PLR, part, clip=0.01)
    assert np.all(nuis.m_hat < 0.01)


# =============================================================================
# PIPELINE
# =============================================================================

def test_run_dml_split_sample_uses_estimation_half():
    gen = np.random.default_rng(9)
    n = 100
    x = gen.normal(size=(n, 3))
    d = x[:, 0] + gen.normal(size=n)
    data = Dataset.from_arrays(d + x[:, 1] + gen.normal(size=n), d, x)
    res = run_dml(data, "plr", SearchSpace("linear"), Scheme.SPLIT_SAMPLE, 5, RngStream(1))
    assert res.estimate.n_used == 50
    assert np.array_equal(res.data.y, data.y[res.outcome.estimation_indices])


def test_run_dml_deterministic():
    gen = np.random.default_rng(10)
    n = 120
    x = gen.normal(size=(n, 3))
    d = (gen.random(n) < 0.5).astype(float)
    data = Dataset.from_arrays(d + x[:, 1] + gen.normal(size=n), d, x)
    space = SearchSpace("random_forest", ({"max_depth": 3, "n_trees": 10},))
    a = run_dml(data, "irm", space, "on_folds", 3, RngStream(4))
    b = run_dml(data, "irm", space, "on_folds", 3, RngStream(4))
    assert a.estimate.theta_hat == b.estimate.theta_hat
    assert a.estimate.std_error == b.estimate.std_error
