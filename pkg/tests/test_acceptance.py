"""Acceptance suite: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v`` to see the report lines; the
Monte Carlo criteria are marked ``slow`` and take several minutes each on
a single core.
"""

import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from dmllab.core import Dataset, ModelKind, RngStream
from dmllab.dgp import LINEAR_ADDITIVE, TEMPLATES, DgpSpec, empirical_snr, gen_acic, gen_bch
from dmllab.dgp import oracle_estimate
from dmllab.dml import NuisancePredictions, irm_ate_estimate, plr_estimate, studentized_value
from dmllab.learners import fit, fit_lasso, predict
from dmllab.runner import (ExperimentConfig, aggregate_rows, run_experiment, run_lambda_surface,
                           run_rows, run_scaling_study)
from dmllab.tuning import SearchSpace, grid_search_cv, tuning_partition


@pytest.fixture
def report(capsys):
    """Print one verdict line outside pytest's capture, then assert it."""
    def _report(number: int, name: str, ok: bool, detail: str, start: float, limit: float):
        elapsed = time.perf_counter() - start
        in_time = elapsed < limit
        verdict = "PASS" if ok and in_time else "FAIL"
        with capsys.disabled():
            print(f"\n{verdict} criterion {number} ({name}): {detail}; "
                  f"{elapsed:.0f}s (limit {limit:.0f}s)")
        assert ok, detail
        assert in_time, f"took {elapsed:.0f}s, limit {limit:.0f}s"
    return _report


def _records(rows):
    return {(r.dgp, r.model, r.learner, r.scheme): r for r in aggregate_rows(rows)}


# =============================================================================
# 1. UNIT ORACLES
# =============================================================================

def test_criterion_1_unit_oracles(report):
    start = time.perf_counter()
    # lasso on X'X/n = I is the soft-threshold of X'y/n
    x = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    coef = fit_lasso(x, x @ [3.0, 0.5], 1.0).parameters["coef"]
    lasso_err = float(np.max(np.abs(coef - [2.0, 0.0])))

    # PLR equals the no-intercept regression of residualised Y on residualised D
    gen = np.random.default_rng(1)
    plr_err = 0.0
    for _ in range(50):
        n = int(gen.integers(5, 200))
        d, y, m_hat, ell_hat = (gen.normal(size=n) for _ in range(4))
        data = Dataset.from_arrays(y, d, np.zeros((n, 1)), "continuous")
        nuis = NuisancePredictions(ModelKind.PLR, m_hat, np.zeros(n, np.int64), ell_hat=ell_hat)
        slope = np.linalg.lstsq((d - m_hat)[:, None], y - ell_hat, rcond=None)[0][0]
        plr_err = max(plr_err, abs(plr_estimate(data, nuis).theta_hat - slope) / max(1, abs(slope)))

    # IRM two-row hand example: scores 3 and 1, ATE 2
    data = Dataset.from_arrays([3.0, 1.0], [1.0, 0.0], np.zeros((2, 1)), "binary")
    nuis = NuisancePredictions(ModelKind.IRM, np.array([0.5, 0.5]), np.zeros(2, np.int64),
                               g0_hat=np.ones(2), g1_hat=np.full(2, 2.0))
    irm = irm_ate_estimate(data, nuis)
    irm_ok = irm.theta_hat == 2.0 and list(irm.scores.psi_b) == [3.0, 1.0]

    # grid-search CV losses against a brute-force recomputation
    xg = gen.normal(size=(120, 4))
    yg = np.sin(xg[:, 1]) + xg[:, 2] ** 2 + gen.normal(size=120)
    rng = RngStream(5)
    space = SearchSpace("tree", tuple({"max_depth": v} for v in (1, 2, 3, 4)))
    _, _, table = grid_search_cv(space, xg, yg, "regression", 5, rng)
    part = tuning_partition(yg, "regression", 5, rng.derive("cv-folds"))
    cv_err = 0.0
    for cfg, reported in table:
        losses = []
        for k in range(5):
            model = fit(cfg, xg[part.complement(k)], yg[part.complement(k)],
                        rng.derive("cv-fit", k))
            va = part.folds[k]
            losses.append(np.mean((yg[va] - predict(model, xg[va])) ** 2))
        cv_err = max(cv_err, abs(np.mean(losses) - reported))

    ok = lasso_err <= 1e-8 and plr_err <= 1e-12 and irm_ok and cv_err <= 1e-12
    detail = (f"lasso {lasso_err:.1e} (<=1e-8), PLR vs OLS {plr_err:.1e} (<=1e-12), "
              f"IRM hand example {'exact' if irm_ok else 'WRONG'}, CV {cv_err:.1e} (<=1e-12)")
    report(1, "unit oracles", ok, detail, start, 60)


# =============================================================================
# 2. ORACLE INFERENCE
# =============================================================================

@pytest.mark.slow
def test_criterion_2_oracle_inference(report):
    start = time.perf_counter()
    reps = 1000
    t = np.empty(reps)
    covered = 0
    for r in range(reps):
        g = gen_bch(100, 200, rng=RngStream(2).derive("rep", r))
        est = oracle_estimate(g, ModelKind.PLR)
        t[r] = studentized_value(est, g.truth.theta0)
        covered += est.ci_low <= g.truth.theta0 <= est.ci_high
    cov, mean, sd = covered / reps, float(t.mean()), float(t.std(ddof=1))
    ok = 0.92 <= cov <= 0.98 and abs(mean) < 0.1 and 0.9 <= sd <= 1.1
    detail = (f"coverage {cov:.3f} in [0.92, 0.98], |mean t| {abs(mean):.3f} < 0.1, "
              f"sd t {sd:.3f} in [0.9, 1.1]")
    report(2, "oracle inference", ok, detail, start, 120)


# =============================================================================
# 3. PENALTY SURFACE
# =============================================================================

@pytest.mark.slow
def test_criterion_3_lambda_surface(report):
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict({"dgp": {"kind": "bch", "n": 100, "p": 200},
                                      "learners": ["lasso"], "reps": 20})
    rows = run_lambda_surface(cfg)
    loss = np.array([r["mean_combined_loss"] for r in rows])
    mse = np.array([r["mse"] for r in rows])
    rho = float(spearmanr(loss, mse).statistic)
    best = rows[int(np.argmin(loss))]
    corner = max(rows, key=lambda r: (r["lambda_ell"], r["lambda_m"]))
    ok = len(rows) == 25 and rho > 0.5 and best["coverage"] >= corner["coverage"]
    detail = (f"spearman(loss, MSE) {rho:.3f} > 0.5, coverage at min loss "
              f"{best['coverage']:.2f} >= max-lambda corner {corner['coverage']:.2f}")
    report(3, "lambda surface", ok, detail, start, 900)


# =============================================================================
# 4. SPLIT-SAMPLE EFFICIENCY LOSS
# =============================================================================

@pytest.mark.slow
def test_criterion_4_scaling(report):
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict({"dgp": {"kind": "bch", "p": 200}, "learners": ["lasso"],
                                      "schemes": ["full_sample", "split_sample"], "reps": 20})
    rows = run_scaling_study(cfg, [100, 400, 1600])
    rmse = {(r["n"], r["scheme"]): r["rmse"] for r in rows}
    ratio = {n: rmse[(n, "split_sample")] / rmse[(n, "full_sample")] for n in (100, 400, 1600)}
    ok = ratio[100] >= 1.0 and ratio[1600] <= ratio[100]
    detail = (f"RMSE split/full {ratio[100]:.3f} at n=100 (>=1), {ratio[400]:.3f} at n=400, "
              f"{ratio[1600]:.3f} at n=1600 (<= n=100 ratio)")
    report(4, "split-sample scaling", ok, detail, start, 1200)


# =============================================================================
# 5. MISSPECIFICATION
# =============================================================================

@pytest.mark.slow
def test_criterion_5_misspecification(report):
    start = time.perf_counter()
    recs = {}
    for tid in (1, 6):
        cfg = ExperimentConfig.from_dict({"dgp": {"kind": "acic", "template_id": tid, "n": 1000},
                                          "models": ["plr", "irm"], "learners": ["boosting"],
                                          "reps": 20})
        rows, _ = run_rows(cfg)
        recs.update(_records(rows))
    lin = {m: recs[("acic1", m, "boosting", "full_sample")] for m in ("plr", "irm")}
    het = {m: recs[("acic6", m, "boosting", "full_sample")] for m in ("plr", "irm")}
    ok = lin["plr"].rrmse < lin["irm"].rrmse and \
        abs(het["irm"].mean_bias) < abs(het["plr"].mean_bias)
    detail = (f"template 1 rRMSE PLR {lin['plr'].rrmse:.3f} < IRM {lin['irm'].rrmse:.3f}; "
              f"template 6 |bias| IRM {abs(het['irm'].mean_bias):.4f} < "
              f"PLR {abs(het['plr'].mean_bias):.4f}")
    report(5, "misspecification", ok, detail, start, 1200)


# =============================================================================
# 6. UNTUNED LEARNER PENALTY
# =============================================================================

@pytest.mark.slow
def test_criterion_6_untuned_boosting(report):
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict({"dgp": {"kind": "bch", "n": 1600, "p": 200},
                                      "learners": ["boosting", "boosting_untuned"], "reps": 20})
    rows, _ = run_rows(cfg)
    recs = _records(rows)
    tuned = recs[("bch", "plr", "boosting", "full_sample")]
    untuned = recs[("bch", "plr", "boosting_untuned", "full_sample")]
    ok = untuned.mean_combined_loss > tuned.mean_combined_loss and \
        abs(untuned.mean_bias) > abs(tuned.mean_bias)
    detail = (f"combined loss untuned {untuned.mean_combined_loss:.4f} > tuned "
              f"{tuned.mean_combined_loss:.4f}; |bias| untuned {abs(untuned.mean_bias):.4f} > "
              f"tuned {abs(tuned.mean_bias):.4f}")
    report(6, "untuned boosting", ok, detail, start, 600)


# =============================================================================
# 7. DOUBLE ROBUSTNESS
# =============================================================================

def test_criterion_7_double_robustness(report):
    start = time.perf_counter()
    reps, n, tau = 500, 500, 1.0
    est = np.empty(reps)
    for r in range(reps):
        gen = np.random.default_rng([7, r])
        x = gen.normal(size=(n, 3))
        d = (gen.random(n) < 0.5).astype(float)
        y = tau * d + np.sin(x[:, 0]) + x[:, 1] ** 2 + gen.normal(size=n)
        data = Dataset.from_arrays(y, d, x, "binary")
        # true propensity, deliberately wrong constant outcome regressions
        nuis = NuisancePredictions(ModelKind.IRM, np.full(n, 0.5), np.zeros(n, np.int64),
                                   g0_hat=np.full(n, 3.0), g1_hat=np.full(n, -2.0))
        est[r] = irm_ate_estimate(data, nuis).theta_hat
    bias = float(est.mean() - tau)
    se = float(est.std(ddof=1) / np.sqrt(reps))
    detail = f"|bias| {abs(bias):.4f} < 3 * MC se {3 * se:.4f}"
    report(7, "double robustness", abs(bias) < 3 * se, detail, start, 120)


# =============================================================================
# 8. DETERMINISM ACROSS WORKERS
# =============================================================================

@pytest.mark.slow
def test_criterion_8_worker_independence(report, tmp_path):
    start = time.perf_counter()
    base = {"dgp": {"kind": "acic", "template_id": 2, "n": 300}, "models": ["plr", "irm"],
            "learners": ["linear", "forest"], "schemes": ["full_sample", "split_sample"],
            "reps": 3}
    run_experiment(ExperimentConfig.from_dict({**base, "workers": 1}), tmp_path / "w1")
    run_experiment(ExperimentConfig.from_dict({**base, "workers": 8}), tmp_path / "w8")
    a = (tmp_path / "w1" / "results.csv").read_bytes()
    b = (tmp_path / "w8" / "results.csv").read_bytes()
    rows = a.count(b"\n") - 1
    report(8, "worker independence", a == b,
           f"results.csv with workers 1 vs 8 {'identical' if a == b else 'DIFFERENT'} "
           f"({rows} rows)", start, 300)


# =============================================================================
# 9. TEMPLATES
# =============================================================================

@pytest.mark.slow
def test_criterion_9_templates(report):
    start = time.perf_counter()
    problems = []
    for tid in range(1, 17):
        try:
            g = gen_acic(tid, rng=RngStream(9).derive("template", tid))
        except Exception as exc:  # any failure to generate fails the criterion
            problems.append(f"template {tid} failed: {exc!r}")
            continue
        if g.data.n != TEMPLATES[tid].n:
            problems.append(f"template {tid} has n={g.data.n}")
        if tid in LINEAR_ADDITIVE:
            gap = float(np.max(np.abs(g.truth.g0_1 - g.truth.g0_0 - g.truth.theta0)))
            if gap > 1e-10:
                problems.append(f"template {tid} contrast off by {gap:.1e}")
        listed = TEMPLATES[tid].snr
        if listed is not None:
            snr = empirical_snr(DgpSpec("acic", tid), reps=100,
                                rng=RngStream(9).derive("snr", tid))
            if not listed / 3 <= snr <= listed * 3:
                problems.append(f"template {tid} SNR {snr:.3f} vs listed {listed}")
    detail = "16 templates generate, contrasts exact, SNR within factor 3" if not problems \
        else "; ".join(problems)
    report(9, "templates", not problems, detail, start, 600)
