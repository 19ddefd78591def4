"""
Monte Carlo aggregation and the learner / causal-model selection rules.

Metrics per (dgp, model, learner, scheme) group over R repetitions::

    rrmse     = sqrt(MSE(theta_hat) / MSE(theta_oracle))
    mean_bias = mean(theta_hat - theta0)
    std_dev   = sqrt(sum((theta_hat - mean(theta_hat))^2) / (R - 1))
    coverage  = share of confidence intervals containing theta0
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import ModelKind
from .dml import CausalEstimate, NuisanceQuality
from .errors import InvalidArgumentError, UndefinedMetricError

# ties resolve to the first label in this order; unknown labels follow alphabetically
CANONICAL_LEARNERS = ("lasso", "forest", "boosting", "stacking", "linear")
SCOPES = ("per_repetition", "per_dgp")
CRITERIA = ("combined_loss", "predictive_loss_y")


# =============================================================================
# TYPES
# =============================================================================

@dataclass(frozen=True)
class RepetitionResult:
    """One estimation cell of one repetition, with the oracle on the same dataset."""

    rep_id: int
    dgp: str
    model_kind: ModelKind
    learner: str
    scheme: str
    estimate: CausalEstimate
    quality: NuisanceQuality
    theta0: float
    oracle: CausalEstimate

    @property
    def group(self) -> tuple[str, str, str, str]:
        return (self.dgp, ModelKind(self.model_kind).value, self.learner, self.scheme)


@dataclass(frozen=True)
class MetricsRecord:
    dgp: str
    model: str
    learner: str
    scheme: str
    rrmse: float
    rrmse_minus_1: float
    mean_bias: float
    std_dev: float
    coverage: float
    mean_combined_loss: float
    mean_predictive_loss_y: float
    reps: int


AGGREGATE_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


# =============================================================================
# AGGREGATION
# =============================================================================

def _covers(est: CausalEstimate, theta0: float) -> bool:
    return bool(est.ci_low <= theta0 <= est.ci_high)


def aggregate(results: Sequence[RepetitionResult]) -> MetricsRecord:
    """Summary metrics for one group of repetitions.

    Raises
    ------
    InvalidArgumentError
        Empty input or results from different groups.
    UndefinedMetricError
        The oracle MSE is zero, so the rRMSE ratio is undefined.
    """
    if not results:
        raise InvalidArgumentError("aggregate needs at least one repetition")
    groups = {r.group for r in results}
    if len(groups) != 1:
        raise InvalidArgumentError(f"aggregate got mixed groups: {sorted(groups)}")
    theta = np.array([r.estimate.theta_hat for r in results])
    oracle = np.array([r.oracle.theta_hat for r in results])
    truth = np.array([r.theta0 for r in results])
    mse = float(np.mean((theta - truth) ** 2))
    mse_oracle = float(np.mean((oracle - truth) ** 2))
    if mse_oracle == 0.0:
        raise UndefinedMetricError("oracle MSE is zero; rRMSE is undefined")
    rrmse = math.sqrt(mse / mse_oracle)
    reps = len(results)
    std = float(np.std(theta, ddof=1)) if reps >= 2 else math.nan
    coverage = sum(_covers(r.estimate, r.theta0) for r in results) / reps
    dgp, model, learner, scheme = results[0].group
    return MetricsRecord(dgp, model, learner, scheme, rrmse, rrmse - 1.0,
                         float(np.mean(theta - truth)), std, coverage,
                         _nanmean([r.quality.combined_loss for r in results]),
                         _nanmean([r.quality.predictive_loss_y for r in results]), reps)


def _nanmean(vals: Sequence[float]) -> float:
    arr = np.asarray(vals, dtype=float)
    arr = arr[np.isfinite(arr)]
    return float(arr.mean()) if arr.size else math.nan


def group_results(results: Iterable[RepetitionResult]) -> dict[tuple, list[RepetitionResult]]:
    out: dict[tuple, list[RepetitionResult]] = defaultdict(list)
    for r in results:
        out[r.group].append(r)
    return dict(sorted(out.items()))


def aggregate_all(results: Iterable[RepetitionResult]) -> list[MetricsRecord]:
    """One record per group in sorted group order; undefined groups are skipped."""
    out = []
    for _, members in group_results(results).items():
        try:
            out.append(aggregate(members))
        except UndefinedMetricError:
            continue
    return out


def write_aggregate_csv(records: Sequence[MetricsRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for rec in records:
            w.writerow([_cell(getattr(rec, c)) for c in AGGREGATE_COLUMNS])


def _cell(v: object) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# =============================================================================
# SELECTION
# =============================================================================

def _order_key(label: str) -> tuple[int, str]:
    if label in CANONICAL_LEARNERS:
        return (CANONICAL_LEARNERS.index(label), "")
    return (len(CANONICAL_LEARNERS), label)


def _criterion(q: NuisanceQuality, criterion: str) -> float:
    if criterion not in CRITERIA:
        raise InvalidArgumentError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    val = float(getattr(q, criterion))
    return val if math.isfinite(val) else math.inf


def _argmin_label(scores: Mapping[str, float]) -> str:
    if not scores:
        raise InvalidArgumentError("selection needs at least one candidate")
    return min(scores, key=lambda lab: (scores[lab], _order_key(lab)))


def _select(candidates: Sequence[RepetitionResult], criterion: str) -> str:
    if not candidates:
        raise InvalidArgumentError("selection needs at least one candidate")
    keys = {(c.rep_id, ModelKind(c.model_kind)) for c in candidates}
    if len(keys) != 1:
        raise InvalidArgumentError("candidates must share one repetition and one model")
    return _argmin_label({c.learner: _criterion(c.quality, criterion) for c in candidates})


def select_learner_combined_loss(candidates: Sequence[RepetitionResult]) -> str:
    """Learner with the smallest combined nuisance loss (canonical order breaks ties)."""
    return _select(candidates, "combined_loss")


def select_learner_y_loss(candidates: Sequence[RepetitionResult]) -> str:
    """Learner with the smallest out-of-sample loss on Y (canonical order breaks ties)."""
    return _select(candidates, "predictive_loss_y")


def select_causal_model(plr_quality: NuisanceQuality, irm_quality: NuisanceQuality) -> ModelKind:
    """Model whose outcome predictions fit Y better; ties go to IRM."""
    plr = _criterion(plr_quality, "predictive_loss_y")
    irm = _criterion(irm_quality, "predictive_loss_y")
    return ModelKind.PLR if plr < irm else ModelKind.IRM


def select_learners(results: Iterable[RepetitionResult], criterion: str,
                    scope: str = "per_repetition") -> dict[tuple, str]:
    """Chosen learner per selection unit.

    ``per_repetition`` keys are ``(dgp, model, scheme, rep_id)``;
    ``per_dgp`` keys are ``(dgp, model, scheme)`` and compare the median
    criterion across repetitions.
    """
    if scope not in SCOPES:
        raise InvalidArgumentError(f"selection_scope must be one of {SCOPES}, got {scope!r}")
    units: dict[tuple, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in results:
        key = (r.dgp, ModelKind(r.model_kind).value, r.scheme)
        if scope == "per_repetition":
            key = key + (r.rep_id,)
        units[key][r.learner].append(_criterion(r.quality, criterion))
    return {key: _argmin_label({lab: float(np.median(v)) for lab, v in by.items()})
            for key, by in sorted(units.items())}


def selected_results(results: Sequence[RepetitionResult], criterion: str,
                     scope: str = "per_repetition",
                     label: str | None = None) -> list[RepetitionResult]:
    """The chosen learner's rows, relabeled so they aggregate as one pseudo-learner."""
    choice = select_learners(results, criterion, scope)
    label = label or f"selected_{criterion}"
    out = []
    for r in results:
        key = (r.dgp, ModelKind(r.model_kind).value, r.scheme)
        if scope == "per_repetition":
            key = key + (r.rep_id,)
        if choice.get(key) == r.learner:
            out.append(replace(r, learner=label))
    return out
