"""Grid search, freezing and the three tuning schemes."""

import math
import warnings

import numpy as np
import pytest

from dmllab import tuning
from dmllab.core import Dataset, ModelKind, RngStream, Scheme, make_kfold, split_half, subset
from dmllab.errors import InvalidArgumentError, SchemeInfeasibleError
from dmllab.learners import LearnerConfig, Task, count_fits, fit, predict
from dmllab.tuning import (SearchSpace, default_space, grid_search_cv, nuisance_problems,
                           tune_full_sample, tune_learner, tune_on_folds, tune_split_sample,
                           tuning_partition)

TREES = SearchSpace("tree", ({"max_depth": 1}, {"max_depth": 3}))


def _data(n=120, binary=False, seed=0):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, 4))
    d = (gen.random(n) < 1 / (1 + np.exp(-x[:, 0]))).astype(float) if binary else \
        x[:, 0] + gen.normal(size=n)
    y = 0.5 * d + np.sin(x[:, 1]) + x[:, 2] ** 2 + gen.normal(size=n)
    return Dataset.from_arrays(y, d, x)


# =============================================================================
# GRID SEARCH
# =============================================================================

def test_cv_losses_match_brute_force():
    data = _data()
    rng = RngStream(5)
    space = SearchSpace("tree", tuple({"max_depth": d} for d in (1, 2, 3, 4)))
    best, loss, table = grid_search_cv(space, data.x, data.y, "regression", 5, rng)
    part = tuning_partition(data.y, Task.REGRESSION, 5, rng.derive("cv-folds"))
    for cfg, reported in table:
        losses = []
        for k in range(5):
            tr = np.setdiff1d(np.arange(data.n), part.folds[k])
            model = fit(cfg, data.x[tr], data.y[tr], rng.derive("cv-fit", k))
            va = part.folds[k]
            losses.append(np.mean((data.y[va] - predict(model, data.x[va])) ** 2))
        assert abs(np.mean(losses) - reported) <= 1e-12
    assert loss == min(l for _, l in table)


def test_probability_cv_uses_log_loss():
    data = _data(binary=True)
    rng = RngStream(6)
    space = SearchSpace("tree", ({"max_depth": 2},))
    _, loss, _ = grid_search_cv(space, data.x, data.d, "probability", 5, rng)
    part = tuning_partition(data.d, Task.PROBABILITY, 5, rng.derive("cv-folds"))
    vals = []
    for k in range(5):
        va = part.folds[k]
        model = fit(space.configs(Task.PROBABILITY)[0], data.x[part.complement(k)],
                    data.d[part.complement(k)], rng.derive("cv-fit", k))
        p = np.clip(predict(model, data.x[va]), 1e-15, 1 - 1e-15)
        vals.append(-np.mean(data.d[va] * np.log(p) + (1 - data.d[va]) * np.log(1 - p)))
    assert abs(np.mean(vals) - loss) <= 1e-12


def test_singleton_grid_returns_its_config():
    data = _data()
    space = SearchSpace("tree", ({"max_depth": 2},))
    best, loss, table = grid_search_cv(space, data.x, data.y, "regression", 5, RngStream(0))
    assert best == space.configs(Task.REGRESSION)[0]
    assert len(table) == 1 and math.isfinite(loss)


def test_ties_keep_grid_order():
    data = _data()
    stump, mean = LearnerConfig("tree", {"max_depth": 0}), LearnerConfig("mean")
    for grid in ([stump, mean], [mean, stump]):
        best, _, table = grid_search_cv(grid, data.x, data.y, "regression", 5, RngStream(1))
        assert abs(table[0][1] - table[1][1]) < 1e-12
        assert best == grid[0]


def test_deeper_tree_wins_on_deep_interaction():
    wins = 0
    for s in range(20):
        gen = np.random.default_rng(500 + s)
        x = gen.normal(size=(600, 6))
        y = 3.0 * np.all(x > -1.0, axis=1) + 0.5 * gen.normal(size=600)
        space = SearchSpace("tree", ({"max_depth": 4, "min_leaf": 5},
                                     {"max_depth": 6, "min_leaf": 5}))
        _, _, table = grid_search_cv(space, x, y, "regression", 5, RngStream(s))
        wins += table[1][1] < table[0][1]
    assert wins >= 16


def test_failed_grid_point_scores_infinity(monkeypatch):
    data = _data()
    real_fit = tuning.fit

    def flaky(cfg, x, y, rng=None):
        if cfg.int("max_depth") == 3:
            raise FloatingPointError("boom")
        return real_fit(cfg, x, y, rng)

    monkeypatch.setattr(tuning, "fit", flaky)
    with pytest.warns(RuntimeWarning, match="failed"):
        best, _, table = grid_search_cv(TREES, data.x, data.y, "regression", 5, RngStream(2))
    assert table[1][1] == math.inf
    assert best.int("max_depth") == 1


def test_search_space_validation():
    with pytest.raises(InvalidArgumentError):
        SearchSpace("tree", ())
    with pytest.raises(InvalidArgumentError):
        SearchSpace("nonsense")
    with pytest.raises(InvalidArgumentError):
        SearchSpace("tree", ({"max_depth": 2, "bogus": 1},))
    assert SearchSpace("linear").resolve(Task.PROBABILITY) == "logistic"
    assert SearchSpace.from_dict(TREES.to_dict()) == TREES


# =============================================================================
# FREEZING
# =============================================================================

def test_cv_lasso_freezes_to_fixed_lasso():
    data = _data()
    res = tune_learner(default_space("lasso"), data.x, data.y, "regression", RngStream(3))
    assert res["config"].family == "lasso"
    assert res["selected"].family == "cv_lasso"
    assert math.isnan(res["cv_loss"])


def test_boosting_freezes_round_count():
    data = _data()
    res = tune_learner(default_space("boosting"), data.x, data.y, "regression", RngStream(4))
    cfg = res["config"]
    assert cfg.int("early_stop_folds") == 0
    assert 0 <= cfg.int("max_rounds") <= 100


def test_stacking_tunes_each_base():
    data = _data()
    space = SearchSpace("stacking", ({"folds": 3},), (TREES, SearchSpace("linear")))
    res = tune_learner(space, data.x, data.y, "regression", RngStream(5))
    assert res["config"].family == "stacking"
    assert len(res["base"]) == 2
    assert res["config"].base[0].family == "tree"
    assert res["config"].base[1].family == "ols"


# =============================================================================
# SCHEMES
# =============================================================================

def test_full_sample_contract():
    data = _data()
    out = tune_full_sample(TREES, data, ModelKind.PLR, 5, RngStream(6))
    assert out.scheme is Scheme.FULL_SAMPLE
    assert out.k == 5 and all(c == out.per_fold_configs[0] for c in out.per_fold_configs)
    assert set(out.per_fold_configs[0]) == {"ell", "m"}
    assert out.estimation_indices.size == 0


def test_irm_nuisances_and_treatment_column():
    data = _data(binary=True)
    probs = nuisance_problems(data, ModelKind.IRM)
    assert set(probs) == {"g", "m"}
    x_g, _, task_g = probs["g"]
    assert x_g.shape[1] == data.p + 1 and np.array_equal(x_g[:, -1], data.d)
    assert probs["m"][2] is Task.PROBABILITY and task_g is Task.REGRESSION
    split = nuisance_problems(data, ModelKind.IRM, irm_g_fit="split")
    assert set(split) == {"g0", "g1", "m"}


@pytest.mark.parametrize("space", [SearchSpace("random_forest", ({"max_depth": 3, "n_trees": 5},)),
                                   SearchSpace("linear")])
def test_singleton_grids_are_seed_free(space):
    data = _data(binary=True)
    a = tune_full_sample(space, data, ModelKind.IRM, 3, RngStream(1))
    b = tune_full_sample(space, data, ModelKind.IRM, 3, RngStream(999))
    assert a.per_fold_configs == b.per_fold_configs


def test_split_sample_contract_and_manual_oracle():
    data = _data(n=100)
    rng = RngStream(7)
    out = tune_split_sample(TREES, data, ModelKind.PLR, 5, rng)
    tune_idx, est_idx = split_half(100, rng.derive("split"))
    assert out.estimation_indices.size == 50
    assert np.array_equal(out.estimation_indices, est_idx)
    assert not set(tune_idx) & set(out.estimation_indices)
    assert all(c == out.per_fold_configs[0] for c in out.per_fold_configs)
    half = subset(data, tune_idx)
    for name, target in (("ell", half.y), ("m", half.d)):
        nrng = rng.derive("tune").derive("nuisance", name).derive("search")
        best, _, _ = grid_search_cv(TREES, half.x, target, "regression", 5, nrng)
        assert out.per_fold_configs[0][name] == best
    again = tune_split_sample(TREES, data, ModelKind.PLR, 5, rng)
    assert again.per_fold_configs == out.per_fold_configs
    assert np.array_equal(again.estimation_indices, out.estimation_indices)


def test_split_sample_needs_eight_rows():
    with pytest.raises(SchemeInfeasibleError):
        tune_split_sample(TREES, _data(n=7), ModelKind.PLR, 2, RngStream(0))


def test_on_folds_manual_oracle():
    data = _data()
    rng = RngStream(8)
    part = make_kfold(data.n, 3, RngStream(9))
    out = tune_on_folds(TREES, data, ModelKind.PLR, part, rng)
    assert out.k == 3
    for k in range(3):
        comp = subset(data, part.complement(k))
        nrng = rng.derive("fold", k).derive("nuisance", "ell").derive("search")
        best, _, _ = grid_search_cv(TREES, comp.x, comp.y, "regression", 5, nrng)
        assert out.per_fold_configs[k]["ell"] == best


def test_on_folds_singleton_identical_configs():
    data = _data()
    part = make_kfold(data.n, 2, RngStream(1))
    space = SearchSpace("tree", ({"max_depth": 2},))
    out = tune_on_folds(space, data, ModelKind.PLR, part, RngStream(2))
    assert out.per_fold_configs[0] == out.per_fold_configs[1]


def test_on_folds_costs_k_times_full_sample():
    data = _data()
    k = 4
    with count_fits() as full:
        tune_full_sample(TREES, data, ModelKind.PLR, k, RngStream(3))
    with count_fits() as nested:
        tune_on_folds(TREES, data, ModelKind.PLR, make_kfold(data.n, k, RngStream(4)),
                      RngStream(3))
    assert full[0] > 0
    assert nested[0] == k * full[0]


def test_outcomes_are_reproducible():
    data = _data(binary=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = tune_full_sample(TREES, data, ModelKind.IRM, 5, RngStream(11))
        b = tune_full_sample(TREES, data, ModelKind.IRM, 5, RngStream(11))
    assert a.per_fold_configs == b.per_fold_configs
    assert a.cv_losses == b.cv_losses
