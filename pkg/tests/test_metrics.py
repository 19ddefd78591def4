"""Monte Carlo aggregation and the selection rules."""

import math

import numpy as np
import pytest

from dmllab.core import ModelKind
from dmllab.dml import CausalEstimate, NuisanceQuality
from dmllab.errors import InvalidArgumentError, UndefinedMetricError
from dmllab.metrics import (RepetitionResult, aggregate, aggregate_all, select_causal_model,
                            select_learner_combined_loss, select_learner_y_loss, select_learners,
                            selected_results, write_aggregate_csv)


def _est(theta, half=0.5):
    return CausalEstimate(theta, half / 1.96, theta - half, theta + half, ModelKind.PLR, 100, None)


def _q(combined=1.0, ploss=1.0):
    return NuisanceQuality(1.0, 1.0, math.nan, combined, ploss)


def _res(theta, oracle, theta0=1.0, rep=0, learner="lasso", half=0.5, q=None, model="plr",
         scheme="full_sample", dgp="bch"):
    return RepetitionResult(rep, dgp, ModelKind(model), learner, scheme, _est(theta, half),
                            q or _q(), theta0, _est(oracle))


# =============================================================================
# AGGREGATION
# =============================================================================

def test_perfect_estimator():
    results = [_res(1.0, 1.5, rep=0, half=0.1), _res(1.0, 0.5, rep=1, half=0.0)]
    rec = aggregate(results)
    assert rec.rrmse == 0.0 and rec.mean_bias == 0.0
    assert rec.coverage == 1.0
    assert rec.rrmse_minus_1 == -1.0


def test_rrmse_ratio():
    # MSE(theta_hat) = 4, MSE(oracle) = 1
    rec = aggregate([_res(3.0, 2.0, rep=0), _res(-1.0, 0.0, rep=1)])
    assert abs(rec.rrmse - 2.0) < 1e-15


def test_bias_and_std_hand_example():
    rec = aggregate([_res(1.0, 2.0, rep=0), _res(3.0, 0.0, rep=1)])
    assert rec.mean_bias == 1.0
    assert abs(rec.std_dev - math.sqrt(2.0)) < 1e-15


def test_aggregate_matches_one_pass_recomputation():
    gen = np.random.default_rng(0)
    theta = gen.normal(0.5, 0.2, 37)
    oracle = gen.normal(0.5, 0.1, 37)
    half = gen.uniform(0.05, 0.5, 37)
    losses = gen.uniform(0.1, 2.0, 37)
    results = [_res(t, o, 0.5, r, half=h, q=_q(c, c * 2))
               for r, (t, o, h, c) in enumerate(zip(theta, oracle, half, losses))]
    rec = aggregate(results)
    mse, mse_o = np.mean((theta - 0.5) ** 2), np.mean((oracle - 0.5) ** 2)
    assert abs(rec.rrmse - math.sqrt(mse / mse_o)) <= 1e-12
    assert abs(rec.mean_bias - np.mean(theta - 0.5)) <= 1e-12
    assert abs(rec.std_dev - np.sqrt(np.sum((theta - theta.mean()) ** 2) / 36)) <= 1e-12
    covered = int(np.sum((theta - half <= 0.5) & (0.5 <= theta + half)))
    assert rec.coverage == covered / 37
    assert abs(rec.mean_combined_loss - losses.mean()) <= 1e-12
    assert abs(rec.mean_predictive_loss_y - 2 * losses.mean()) <= 1e-12
    assert rec.reps == 37


def test_aggregate_errors():
    with pytest.raises(InvalidArgumentError):
        aggregate([])
    with pytest.raises(InvalidArgumentError):
        aggregate([_res(1.0, 0.0, learner="lasso"), _res(1.0, 0.0, learner="forest")])
    with pytest.raises(UndefinedMetricError):
        aggregate([_res(2.0, 1.0), _res(0.0, 1.0, rep=1)])


def test_single_rep_std_is_nan():
    assert math.isnan(aggregate([_res(1.2, 0.9)]).std_dev)


def test_aggregate_all_skips_undefined_and_writes_csv(tmp_path):
    results = [_res(1.2, 0.9, rep=r) for r in range(3)]
    results += [_res(1.2, 1.0, rep=r, learner="forest") for r in range(3)]
    recs = aggregate_all(results)
    assert [r.learner for r in recs] == ["lasso"]
    path = tmp_path / "agg.csv"
    write_aggregate_csv(recs, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("dgp,model,learner,scheme,rrmse,rrmse_minus_1,mean_bias")
    assert len(lines) == 2


# =============================================================================
# SELECTION
# =============================================================================

def test_combined_loss_selection():
    a = _res(1.0, 0.0, learner="lasso", q=_q(0.75))
    b = _res(1.0, 0.0, learner="forest", q=_q(0.8))
    assert select_learner_combined_loss([a, b]) == "lasso"
    assert select_learner_combined_loss([b, a]) == "lasso"


def test_canonical_tie_break():
    labels = ["linear", "stacking", "boosting", "forest", "lasso"]
    cands = [_res(1.0, 0.0, learner=lab, q=_q(0.5)) for lab in labels]
    assert select_learner_combined_loss(cands) == "lasso"
    assert select_learner_combined_loss(cands[:3]) == "boosting"
    odd = [_res(1.0, 0.0, learner=lab, q=_q(0.5)) for lab in ("zeta", "alpha", "linear")]
    assert select_learner_combined_loss(odd) == "linear"
    assert select_learner_combined_loss(odd[:2]) == "alpha"


def test_y_loss_selection():
    a = _res(1.0, 0.0, learner="forest", q=_q(ploss=1.0))
    b = _res(1.0, 0.0, learner="boosting", q=_q(ploss=0.4))
    assert select_learner_y_loss([a]) == "forest"
    assert select_learner_y_loss([a, b]) == "boosting"
    assert select_learner_y_loss([b, a]) == "boosting"


def test_selection_requires_one_rep_and_model():
    a = _res(1.0, 0.0, rep=0)
    b = _res(1.0, 0.0, rep=1, learner="forest")
    with pytest.raises(InvalidArgumentError):
        select_learner_combined_loss([a, b])


def test_selection_invariant_under_monotone_transforms():
    gen = np.random.default_rng(1)
    labels = ["lasso", "forest", "boosting", "stacking", "linear"]
    transforms = [lambda v: 3.0 * v, np.log, np.sqrt, lambda v: v ** 3 + 2.0, np.exp]
    for _ in range(200):
        vals = gen.uniform(0.01, 5.0, size=5)
        if gen.random() < 0.3:
            vals[gen.integers(5)] = vals[gen.integers(5)]
        base = select_learner_combined_loss(
            [_res(1.0, 0.0, learner=l, q=_q(v)) for l, v in zip(labels, vals)])
        for f in transforms:
            moved = [_res(1.0, 0.0, learner=l, q=_q(float(f(v)))) for l, v in zip(labels, vals)]
            assert select_learner_combined_loss(moved) == base
            perm = gen.permutation(5)
            assert select_learner_combined_loss([moved[i] for i in perm]) == base


def test_nan_criterion_loses():
    a = _res(1.0, 0.0, learner="lasso", q=_q(math.nan))
    b = _res(1.0, 0.0, learner="forest", q=_q(9.0))
    assert select_learner_combined_loss([a, b]) == "forest"


def test_causal_model_selection():
    assert select_causal_model(_q(ploss=1.2), _q(ploss=1.0)) is ModelKind.IRM
    assert select_causal_model(_q(ploss=1.0), _q(ploss=1.0)) is ModelKind.IRM
    assert select_causal_model(_q(ploss=0.9), _q(ploss=1.0)) is ModelKind.PLR


def test_selection_scopes():
    rows = []
    # forest wins rep 0, lasso wins reps 1 and 2; the median favours lasso
    for rep, (l_loss, f_loss) in enumerate([(5.0, 1.0), (1.0, 2.0), (1.0, 3.0)]):
        rows.append(_res(1.0 + rep, 0.5, rep=rep, learner="lasso", q=_q(l_loss)))
        rows.append(_res(2.0 + rep, 0.5, rep=rep, learner="forest", q=_q(f_loss)))
    per_rep = select_learners(rows, "combined_loss", "per_repetition")
    assert [per_rep[("bch", "plr", "full_sample", r)] for r in range(3)] == \
        ["forest", "lasso", "lasso"]
    per_dgp = select_learners(rows, "combined_loss", "per_dgp")
    assert per_dgp == {("bch", "plr", "full_sample"): "lasso"}
    chosen = selected_results(rows, "combined_loss")
    assert [r.estimate.theta_hat for r in chosen] == [2.0, 2.0, 3.0]
    assert {r.learner for r in chosen} == {"selected_combined_loss"}
    with pytest.raises(InvalidArgumentError):
        select_learners(rows, "combined_loss", "global")
