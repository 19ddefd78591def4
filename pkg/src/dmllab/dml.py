"""
Cross-fitted nuisance prediction and the orthogonal-score estimators.

PLR (partialling out), with ``V = D - m(X)`` and ``U = Y - ell(X)``::

    psi = (U - theta V) V,   theta_hat = sum(V U) / sum(V^2)

IRM (AIPW score for the ATE)::

    psi = g(1,X) - g(0,X) + D (Y - g(1,X)) / m(X)
          - (1 - D)(Y - g(0,X)) / (1 - m(X)) - theta

Both scores are linear in theta, ``psi = psi_a theta + psi_b``; the
variance is ``mean(psi^2) / J^2`` with ``J = mean(psi_a)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from numpy.typing import NDArray
from scipy.stats import norm

from .core import (Dataset, FoldPartition, ModelKind, RngStream, Scheme, make_kfold,
                   make_stratified_kfold, subset)
from .errors import (DegenerateDesignError, FoldDegenerateError, InvalidArgumentError,
                     InvalidModelError, StratificationError)
from .learners import fit, predict
from .tuning import (SearchSpace, TuningOutcome, irm_design, tune_full_sample, tune_on_folds,
                     tune_split_sample)

DEFAULT_CLIP = 0.01
DEFAULT_LEVEL = 0.95
_DEGENERATE = 1e-12


def _ro(a) -> NDArray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


# =============================================================================
# TYPES
# =============================================================================

@dataclass(frozen=True)
class NuisancePredictions:
    """Out-of-fold nuisance predictions; unused fields are ``None``."""

    model_kind: ModelKind
    m_hat: NDArray
    fold_of: NDArray
    ell_hat: NDArray | None = None
    g0_hat: NDArray | None = None
    g1_hat: NDArray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        for name in ("m_hat", "ell_hat", "g0_hat", "g1_hat"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _ro(val))
        fo = np.array(self.fold_of, dtype=np.int64)
        fo.setflags(write=False)
        object.__setattr__(self, "fold_of", fo)
        needed = ("ell_hat",) if self.model_kind is ModelKind.PLR else ("g0_hat", "g1_hat")
        for name in needed:
            if getattr(self, name) is None:
                raise InvalidArgumentError(f"{self.model_kind.value} predictions need {name}")


@dataclass(frozen=True)
class ScoreComponents:
    psi: NDArray
    psi_a: NDArray
    psi_b: NDArray
    j_hat: float


@dataclass(frozen=True)
class CausalEstimate:
    theta_hat: float
    std_error: float
    ci_low: float
    ci_high: float
    model_kind: ModelKind
    n_used: int
    scores: ScoreComponents
    level: float = DEFAULT_LEVEL


@dataclass(frozen=True)
class NuisanceQuality:
    """Out-of-fold nuisance errors; fields that do not apply to the model are NaN."""

    rmse_m: float
    rmse_ell: float
    rmse_g: float
    combined_loss: float
    predictive_loss_y: float


# =============================================================================
# CROSS-FITTING
# =============================================================================

def make_partition(data: Dataset, model_kind: ModelKind | str, k: int,
                   rng: RngStream) -> FoldPartition:
    """Plain K folds for PLR; folds stratified on D for IRM when feasible."""
    if ModelKind(model_kind) is ModelKind.IRM and data.binary:
        try:
            return make_stratified_kfold(data.d, k, rng)
        except StratificationError:
            pass
    return make_kfold(data.n, k, rng)


def cross_fit_nuisances(data: Dataset, outcome: TuningOutcome, model_kind: ModelKind | str,
                        partition: FoldPartition, clip: float = DEFAULT_CLIP,
                        rng: RngStream | None = None) -> NuisancePredictions:
    """Fit every nuisance on ``I_k^C`` and predict on ``I_k`` for each fold.

    For split-sample outcomes ``data`` must already be the estimation half
    (see :func:`estimation_sample`). IRM propensities are clipped to
    ``[clip, 1 - clip]``; PLR propensities are left unclipped.
    """
    model_kind = ModelKind(model_kind)
    rng = rng if rng is not None else RngStream(0)
    if outcome.model_kind is not model_kind:
        raise InvalidArgumentError("tuning outcome was produced for a different model")
    if outcome.k != partition.k:
        raise InvalidArgumentError(f"outcome has {outcome.k} folds, partition has {partition.k}")
    if partition.n != data.n:
        raise InvalidArgumentError(f"partition covers {partition.n} rows, data has {data.n}")
    if not 0.0 <= clip < 0.5:
        raise InvalidArgumentError(f"clip must lie in [0, 0.5), got {clip}")
    if model_kind is ModelKind.IRM and not data.binary:
        raise InvalidModelError("IRM needs a binary treatment")

    n = data.n
    m_hat = np.empty(n)
    ell_hat = np.empty(n) if model_kind is ModelKind.PLR else None
    g0_hat = np.empty(n) if model_kind is ModelKind.IRM else None
    g1_hat = np.empty(n) if model_kind is ModelKind.IRM else None
    x, y, d = data.x, data.y, data.d

    for k in range(partition.k):
        tr, te = partition.complement(k), partition.folds[k]
        if te.size == 0:
            continue
        cfg = outcome.per_fold_configs[k]
        frng = rng.derive("fold", k)
        if model_kind is ModelKind.PLR:
            ell_hat[te] = predict(fit(cfg["ell"], x[tr], y[tr], frng.derive("ell")), x[te])
            m_hat[te] = predict(fit(cfg["m"], x[tr], d[tr], frng.derive("m")), x[te])
            continue
        dtr = d[tr]
        if dtr.min() == dtr.max():
            raise FoldDegenerateError(k)
        if outcome.irm_g_fit == "split":
            for arm, out in ((0, g0_hat), (1, g1_hat)):
                rows = tr[dtr == arm]
                out[te] = predict(fit(cfg[f"g{arm}"], x[rows], y[rows], frng.derive(f"g{arm}")),
                                  x[te])
        else:
            model = fit(cfg["g"], irm_design(x[tr], dtr), y[tr], frng.derive("g"))
            g0_hat[te] = predict(model, irm_design(x[te], 0.0))
            g1_hat[te] = predict(model, irm_design(x[te], 1.0))
        m_hat[te] = np.clip(predict(fit(cfg["m"], x[tr], dtr, frng.derive("m")), x[te]),
                            clip, 1.0 - clip)
    return NuisancePredictions(model_kind, m_hat, partition.fold_of(), ell_hat, g0_hat, g1_hat)


def estimation_sample(data: Dataset, outcome: TuningOutcome) -> Dataset:
    """Rows the estimator may use: the estimation half for split-sample tuning, else all."""
    if outcome.scheme is Scheme.SPLIT_SAMPLE:
        return subset(data, outcome.estimation_indices)
    return data


# =============================================================================
# ESTIMATORS
# =============================================================================

def _z(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise InvalidArgumentError(f"level must lie in (0, 1), got {level}")
    return float(norm.ppf(0.5 + level / 2.0))


def _finish(theta: float, psi_a: NDArray, psi_b: NDArray, model_kind: ModelKind,
            level: float) -> CausalEstimate:
    n = psi_a.shape[0]
    psi = psi_a * theta + psi_b
    j_hat = float(np.mean(psi_a))
    se = math.sqrt(float(np.mean(psi ** 2)) / j_hat ** 2 / n)
    half = _z(level) * se
    scores = ScoreComponents(_ro(psi), _ro(psi_a), _ro(psi_b), j_hat)
    return CausalEstimate(float(theta), se, float(theta - half), float(theta + half), model_kind,
                          n, scores, level)


def _solve(psi_a: NDArray, psi_b: NDArray, fold_of: NDArray, aggregation: str) -> float:
    if aggregation == "pooled":
        return float(-np.sum(psi_b) / np.sum(psi_a))
    if aggregation == "per_fold":
        thetas = [-np.sum(psi_b[fold_of == k]) / np.sum(psi_a[fold_of == k])
                  for k in np.unique(fold_of)]
        return float(np.mean(thetas))
    raise InvalidArgumentError(f"aggregation must be 'pooled' or 'per_fold', got {aggregation!r}")


def plr_estimate(data: Dataset, nuis: NuisancePredictions, level: float = DEFAULT_LEVEL,
                 aggregation: str = "pooled") -> CausalEstimate:
    """Partialling-out estimate of the constant treatment effect."""
    if nuis.model_kind is not ModelKind.PLR:
        raise InvalidArgumentError("plr_estimate needs PLR nuisance predictions")
    v = data.d - nuis.m_hat
    u = data.y - nuis.ell_hat
    if float(np.sum(v * v)) <= _DEGENERATE:
        raise DegenerateDesignError("treatment residuals have no variance left (m_hat ~ D)")
    psi_a = -v * v
    psi_b = v * u
    if aggregation == "per_fold":
        for k in np.unique(nuis.fold_of):
            if float(np.sum(v[nuis.fold_of == k] ** 2)) <= _DEGENERATE:
                raise DegenerateDesignError(f"fold {k}: treatment residuals have no variance")
    theta = _solve(psi_a, psi_b, nuis.fold_of, aggregation)
    return _finish(theta, psi_a, psi_b, ModelKind.PLR, level)


def irm_ate_estimate(data: Dataset, nuis: NuisancePredictions, level: float = DEFAULT_LEVEL,
                     aggregation: str = "pooled") -> CausalEstimate:
    """AIPW (doubly robust) estimate of the average treatment effect."""
    if not data.binary:
        raise InvalidModelError("IRM needs a binary treatment")
    if nuis.model_kind is not ModelKind.IRM:
        raise InvalidArgumentError("irm_ate_estimate needs IRM nuisance predictions")
    d, y, m = data.d, data.y, nuis.m_hat
    if np.any((m <= 0.0) | (m >= 1.0)):
        raise InvalidArgumentError("IRM propensities must lie strictly inside (0, 1)")
    g0, g1 = nuis.g0_hat, nuis.g1_hat
    psi_b = g1 - g0 + d * (y - g1) / m - (1.0 - d) * (y - g0) / (1.0 - m)
    psi_a = -np.ones_like(psi_b)
    theta = _solve(psi_a, psi_b, nuis.fold_of, aggregation)
    return _finish(theta, psi_a, psi_b, ModelKind.IRM, level)


def estimate(data: Dataset, nuis: NuisancePredictions, level: float = DEFAULT_LEVEL,
             aggregation: str = "pooled") -> CausalEstimate:
    if nuis.model_kind is ModelKind.PLR:
        return plr_estimate(data, nuis, level, aggregation)
    return irm_ate_estimate(data, nuis, level, aggregation)


def _rmse(a: NDArray) -> float:
    return float(np.sqrt(np.mean(a * a)))


def nuisance_quality(data: Dataset, nuis: NuisancePredictions, theta_hat: float) -> NuisanceQuality:
    """Out-of-fold RMSEs against observed targets and the combined loss.

    PLR: ``combined = rmse_m (rmse_m + rmse_ell)`` and the outcome loss is
    ``mean((Y - theta D - ell_hat)^2)``. IRM: ``combined = rmse_m rmse_g``
    with ``g`` evaluated on the observed arm, which is also the outcome loss.
    """
    rmse_m = _rmse(data.d - nuis.m_hat)
    if nuis.model_kind is ModelKind.PLR:
        rmse_ell = _rmse(data.y - nuis.ell_hat)
        pred = float(np.mean((data.y - theta_hat * data.d - nuis.ell_hat) ** 2))
        return NuisanceQuality(rmse_m, rmse_ell, math.nan, rmse_m * (rmse_m + rmse_ell), pred)
    g_obs = data.d * nuis.g1_hat + (1.0 - data.d) * nuis.g0_hat
    rmse_g = _rmse(data.y - g_obs)
    return NuisanceQuality(rmse_m, math.nan, rmse_g, rmse_m * rmse_g, rmse_g ** 2)


def studentized_value(est: CausalEstimate, theta0: float) -> float:
    if not est.std_error > 0.0:
        raise InvalidArgumentError("studentizing needs a positive standard error")
    return (est.theta_hat - theta0) / est.std_error


# =============================================================================
# PIPELINE
# =============================================================================

@dataclass(frozen=True)
class DmlResult:
    estimate: CausalEstimate
    quality: NuisanceQuality
    nuisances: NuisancePredictions
    outcome: TuningOutcome
    data: Dataset


def run_dml(data: Dataset, model_kind: ModelKind | str,
            spaces: SearchSpace | Mapping[str, SearchSpace] | None = None,
            scheme: Scheme | str = Scheme.FULL_SAMPLE, k: int = 5, rng: RngStream | None = None,
            clip: float = DEFAULT_CLIP, level: float = DEFAULT_LEVEL,
            aggregation: str = "pooled", irm_g_fit: str = "pooled",
            outcome: TuningOutcome | None = None, skip_singleton: bool = True) -> DmlResult:
    """Tune, cross-fit and estimate in one call.

    A precomputed ``outcome`` (e.g. fixed configurations) bypasses tuning.
    """
    model_kind = ModelKind(model_kind)
    scheme = Scheme(scheme)
    rng = rng if rng is not None else RngStream(0)
    if model_kind is ModelKind.IRM and not data.binary:
        raise InvalidModelError("IRM needs a binary treatment")
    if outcome is None:
        if spaces is None:
            raise InvalidArgumentError("need search spaces or a tuning outcome")
        tune_rng = rng.derive("tuning")
        if scheme is Scheme.ON_FOLDS:
            partition = make_partition(data, model_kind, k, rng.derive("crossfit"))
            outcome = tune_on_folds(spaces, data, model_kind, partition, tune_rng,
                                    irm_g_fit=irm_g_fit, skip_singleton=skip_singleton)
        elif scheme is Scheme.SPLIT_SAMPLE:
            outcome = tune_split_sample(spaces, data, model_kind, k, tune_rng,
                                        irm_g_fit=irm_g_fit, skip_singleton=skip_singleton)
        else:
            outcome = tune_full_sample(spaces, data, model_kind, k, tune_rng,
                                       irm_g_fit=irm_g_fit, skip_singleton=skip_singleton)
    est_data = estimation_sample(data, outcome)
    if model_kind is ModelKind.IRM and est_data.d.min() == est_data.d.max():
        raise InvalidModelError("estimation sample lacks a treatment class")
    partition = make_partition(est_data, model_kind, k, rng.derive("crossfit"))
    nuis = cross_fit_nuisances(est_data, outcome, model_kind, partition, clip, rng.derive("fit"))
    est = estimate(est_data, nuis, level, aggregation)
    return DmlResult(est, nuisance_quality(est_data, nuis, est.theta_hat), nuis, outcome, est_data)
