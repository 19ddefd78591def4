"""
Hyperparameter search and the three ways of coupling tuning to
cross-fitting.

* full sample: tune once on all rows (CV splits independent of the
  cross-fitting partition) and reuse the configuration in every fold;
* split sample: tune on one half, estimate on the other;
* on folds: tune separately inside every training complement ``I_k^C``.

After selection a configuration is *frozen* on its tuning data: learners
that tune themselves internally (CV lasso, early-stopped boosting) are
replaced by their fixed counterparts (lasso at the chosen penalty,
boosting with the chosen round count). Without this step a self-tuning
learner would silently re-tune inside every cross-fitting fold and the
three schemes would coincide.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .core import (Dataset, FoldPartition, ModelKind, RngStream, Scheme, make_kfold,
                   make_stratified_kfold, split_half, subset)
from .errors import InvalidArgumentError, InvalidModelError, SchemeInfeasibleError
from .learners import FAMILIES, LearnerConfig, Task, fit, predict

TUNING_CV_FOLDS = 5
_LOG_CLAMP = 1e-15


# =============================================================================
# SEARCH SPACES
# =============================================================================

@dataclass(frozen=True)
class SearchSpace:
    """A learner family and the hyperparameter maps to search over.

    ``family`` may be ``"linear"``, which resolves to OLS for regression
    and logistic regression for probability targets. A stacking space
    carries the spaces of its base learners; each base is tuned on its own
    before being stacked.
    """

    family: str
    grid: tuple[Mapping[str, float], ...] = ({},)
    base: tuple["SearchSpace", ...] = ()

    def __post_init__(self) -> None:
        grid = tuple(dict(g) for g in self.grid)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "base", tuple(self.base))
        if not grid:
            raise InvalidArgumentError("search grid must be nonempty")
        if self.family != "linear" and self.family not in FAMILIES:
            raise InvalidArgumentError(f"unknown learner family {self.family!r}")
        if self.family == "stacking" and not self.base:
            raise InvalidArgumentError("a stacking space needs base spaces")
        # validate every map against the family
        for task in (Task.REGRESSION, Task.PROBABILITY):
            if self._supports(task):
                self.configs(task, tuple(LearnerConfig("mean", {}, task) for _ in self.base))
                break

    def _supports(self, task: Task) -> bool:
        fam = self.resolve(task)
        return not ((fam == "ols" and task is Task.PROBABILITY)
                    or (fam == "logistic" and task is Task.REGRESSION))

    def resolve(self, task: Task) -> str:
        if self.family == "linear":
            return "logistic" if task is Task.PROBABILITY else "ols"
        return self.family

    def configs(self, task: Task, base: tuple[LearnerConfig, ...] = ()) -> list[LearnerConfig]:
        fam = self.resolve(task)
        return [LearnerConfig(fam, g, task, base if fam == "stacking" else ()) for g in self.grid]

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"family": self.family, "grid": [dict(g) for g in self.grid]}
        if self.base:
            out["base"] = [b.to_dict() for b in self.base]
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SearchSpace":
        return cls(d["family"], tuple(d.get("grid", ({},))),
                   tuple(cls.from_dict(b) for b in d.get("base", ())))


LEARNER_ORDER = ("lasso", "forest", "boosting", "stacking", "linear", "mean")


def default_space(label: str) -> SearchSpace:
    """Built-in search space for a learner label."""
    if label == "lasso":
        return SearchSpace("cv_lasso")
    if label == "forest":
        return SearchSpace("random_forest", tuple({"max_depth": d, "n_trees": 100} for d in (4, 5, 6)))
    if label == "boosting":
        return SearchSpace("gradient_boosting", ({"max_depth": 2, "learning_rate": 0.1,
                                                  "max_rounds": 100, "early_stop_folds": 5},))
    if label == "boosting_untuned":
        return SearchSpace("gradient_boosting", ({"max_depth": 6, "learning_rate": 0.3,
                                                  "max_rounds": 100, "early_stop_folds": 0},))
    if label == "linear":
        return SearchSpace("linear")
    if label == "mean":
        return SearchSpace("mean")
    if label == "stacking":
        return SearchSpace("stacking", ({"folds": 5},),
                           tuple(default_space(b) for b in ("lasso", "forest", "boosting", "linear")))
    raise InvalidArgumentError(f"no built-in search space for learner label {label!r}")


# =============================================================================
# GRID SEARCH
# =============================================================================

def cv_loss(y: NDArray, pred: NDArray, task: Task) -> float:
    """Mean squared error, or log-loss for probability targets."""
    if task is Task.PROBABILITY:
        p = np.clip(pred, _LOG_CLAMP, 1.0 - _LOG_CLAMP)
        return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    return float(np.mean((y - pred) ** 2))


def tuning_partition(y: NDArray, task: Task, folds: int, rng: RngStream) -> FoldPartition:
    """CV folds for tuning; stratified when the target is a 0/1 label with enough of each class."""
    if task is Task.PROBABILITY and np.all((y == 0.0) | (y == 1.0)):
        counts = (int(np.sum(y == 0.0)), int(np.sum(y == 1.0)))
        if min(counts) >= folds:
            return make_stratified_kfold(y, folds, rng)
    return make_kfold(y.shape[0], folds, rng)


def grid_search_cv(space: SearchSpace | Sequence[LearnerConfig], x, y, task: Task | str,
                   folds: int = TUNING_CV_FOLDS, rng: RngStream | None = None,
                   ) -> tuple[LearnerConfig, float, list[tuple[LearnerConfig, float]]]:
    """Pick the grid point with the lowest mean K-fold CV loss.

    Every grid point is evaluated on the same folds with the same per-fold
    random streams. A grid point whose fit fails scores ``+inf`` with a
    warning. Ties keep the earliest grid point.
    """
    task = Task(task)
    rng = rng if rng is not None else RngStream(0)
    configs = space.configs(task) if isinstance(space, SearchSpace) else list(space)
    if not configs:
        raise InvalidArgumentError("search grid must be nonempty")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    part = tuning_partition(y, task, folds, rng.derive("cv-folds"))
    table: list[tuple[LearnerConfig, float]] = []
    for cfg in configs:
        try:
            losses = []
            for k in range(part.k):
                tr, va = part.complement(k), part.folds[k]
                model = fit(cfg, x[tr], y[tr], rng.derive("cv-fit", k))
                losses.append(cv_loss(y[va], predict(model, x[va]), task))
            loss = float(np.mean(losses))
            if not math.isfinite(loss):
                raise FloatingPointError("non-finite CV loss")
        except Exception as exc:  # noqa: BLE001 - any learner failure scores +inf
            warnings.warn(f"grid point {cfg.describe()} failed: {exc}", RuntimeWarning, stacklevel=2)
            loss = math.inf
        table.append((cfg, loss))
    best = min(range(len(table)), key=lambda i: (table[i][1], i))
    return table[best][0], table[best][1], table


def freeze(config: LearnerConfig, x, y, rng: RngStream) -> LearnerConfig:
    """Replace internally self-tuning learners by their fitted fixed counterparts."""
    if config.family == "cv_lasso":
        model = fit(config, x, y, rng)
        return LearnerConfig("lasso", {"lambda": model.info["lambda"], "tol": config.get("tol"),
                                       "max_sweeps": config.get("max_sweeps")}, config.task)
    if config.family == "gradient_boosting" and config.int("early_stop_folds") >= 2:
        model = fit(config, x, y, rng)
        return config.replace(max_rounds=model.info["n_rounds"], early_stop_folds=0)
    return config


def tune_learner(space: SearchSpace, x, y, task: Task | str, rng: RngStream,
                 folds: int = TUNING_CV_FOLDS, skip_singleton: bool = True) -> dict[str, Any]:
    """Search, then freeze. Returns ``{"config", "cv_loss", "table"}``.

    With ``skip_singleton`` a one-point grid is taken without CV (its loss
    is reported as NaN) since there is nothing to choose.
    """
    task = Task(task)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    base: tuple[LearnerConfig, ...] = ()
    base_audit = []
    if space.resolve(task) == "stacking":
        tuned = [tune_learner(b, x, y, task, rng.derive("base", i), folds, skip_singleton)
                 for i, b in enumerate(space.base)]
        base = tuple(t["config"] for t in tuned)
        base_audit = [_audit(t) for t in tuned]
    configs = space.configs(task, base)
    if len(configs) == 1 and skip_singleton:
        best, loss, table = configs[0], math.nan, [(configs[0], math.nan)]
    else:
        best, loss, table = grid_search_cv(configs, x, y, task, folds, rng.derive("search"))
    frozen = freeze(best, x, y, rng.derive("freeze"))
    out = {"config": frozen, "selected": best, "cv_loss": loss, "table": table}
    if base_audit:
        out["base"] = base_audit
    return out


def _audit(t: Mapping[str, Any]) -> dict:
    out = {"config": t["config"].describe(), "selected": t["selected"].describe(),
           "cv_loss": t["cv_loss"],
           "table": [{"config": c.describe(), "cv_loss": l} for c, l in t["table"]]}
    if "base" in t:
        out["base"] = t["base"]
    return out


# =============================================================================
# NUISANCE TARGETS
# =============================================================================

def irm_design(x: NDArray, d: NDArray | float) -> NDArray:
    """Covariates with the treatment appended as the last column."""
    d_col = np.broadcast_to(np.asarray(d, dtype=float), (x.shape[0],))
    return np.column_stack([x, d_col])


def nuisance_problems(data: Dataset, model_kind: ModelKind | str,
                      irm_g_fit: str = "pooled") -> dict[str, tuple[NDArray, NDArray, Task]]:
    """Regression/classification problems per nuisance: name -> (x, y, task).

    PLR: ``ell`` (Y on X) and ``m`` (D on X, probability task for binary D).
    IRM: ``g`` (Y on (X, D)) or per-arm ``g0``/``g1``, and ``m``.
    """
    model_kind = ModelKind(model_kind)
    if model_kind is ModelKind.PLR:
        return {"ell": (data.x, data.y, Task.REGRESSION),
                "m": (data.x, data.d, Task.PROBABILITY if data.binary else Task.REGRESSION)}
    if not data.binary:
        raise InvalidModelError("IRM needs a binary treatment")
    out: dict[str, tuple[NDArray, NDArray, Task]] = {}
    if irm_g_fit == "pooled":
        out["g"] = (irm_design(data.x, data.d), data.y, Task.REGRESSION)
    elif irm_g_fit == "split":
        for arm in (0, 1):
            rows = data.d == arm
            out[f"g{arm}"] = (data.x[rows], data.y[rows], Task.REGRESSION)
    else:
        raise InvalidArgumentError(f"irm_g_fit must be 'pooled' or 'split', got {irm_g_fit!r}")
    out["m"] = (data.x, data.d, Task.PROBABILITY)
    return out


def _space_for(spaces: SearchSpace | Mapping[str, SearchSpace], name: str) -> SearchSpace:
    if isinstance(spaces, SearchSpace):
        return spaces
    if name in spaces:
        return spaces[name]
    if name in ("g0", "g1") and "g" in spaces:
        return spaces["g"]
    raise InvalidArgumentError(f"no search space for nuisance {name!r}")


# =============================================================================
# SCHEMES
# =============================================================================

@dataclass(frozen=True)
class TuningOutcome:
    """Per-fold nuisance configurations chosen by a tuning scheme."""

    scheme: Scheme
    model_kind: ModelKind
    per_fold_configs: tuple[Mapping[str, LearnerConfig], ...]
    cv_losses: tuple[Mapping[str, float], ...]
    estimation_indices: NDArray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    irm_g_fit: str = "pooled"
    audit: tuple[Mapping[str, Any], ...] = ()

    def __post_init__(self) -> None:
        idx = np.array(self.estimation_indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "estimation_indices", idx)
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))

    @property
    def k(self) -> int:
        return len(self.per_fold_configs)

    def audit_record(self) -> dict:
        return {"scheme": self.scheme.value, "model": self.model_kind.value,
                "irm_g_fit": self.irm_g_fit,
                "per_fold_configs": [{n: c.describe() for n, c in fc.items()}
                                     for fc in self.per_fold_configs],
                "cv_losses": [dict(l) for l in self.cv_losses],
                "n_estimation": int(self.estimation_indices.size),
                "tables": list(self.audit)}


def _tune_all(spaces, data: Dataset, model_kind, rng: RngStream, cv_folds: int,
              irm_g_fit: str, skip_singleton: bool):
    configs, losses, audit = {}, {}, {}
    for name, (x, y, task) in nuisance_problems(data, model_kind, irm_g_fit).items():
        res = tune_learner(_space_for(spaces, name), x, y, task, rng.derive("nuisance", name),
                           cv_folds, skip_singleton)
        configs[name] = res["config"]
        losses[name] = res["cv_loss"]
        audit[name] = _audit(res)
    return configs, losses, audit


def tune_full_sample(spaces: SearchSpace | Mapping[str, SearchSpace], data: Dataset,
                     model_kind: ModelKind | str, k: int, rng: RngStream,
                     cv_folds: int = TUNING_CV_FOLDS, irm_g_fit: str = "pooled",
                     skip_singleton: bool = True) -> TuningOutcome:
    """Tune every nuisance on the whole sample and reuse it in all K folds."""
    configs, losses, audit = _tune_all(spaces, data, model_kind, rng.derive("full"), cv_folds,
                                       irm_g_fit, skip_singleton)
    return TuningOutcome(Scheme.FULL_SAMPLE, ModelKind(model_kind), tuple(configs for _ in range(k)),
                         tuple(losses for _ in range(k)), irm_g_fit=irm_g_fit, audit=(audit,))


def tune_split_sample(spaces: SearchSpace | Mapping[str, SearchSpace], data: Dataset,
                      model_kind: ModelKind | str, k: int, rng: RngStream,
                      cv_folds: int = TUNING_CV_FOLDS, irm_g_fit: str = "pooled",
                      skip_singleton: bool = True) -> TuningOutcome:
    """Tune on a random half; estimation later uses only the other half."""
    if data.n < 8:
        raise SchemeInfeasibleError(f"split_sample needs n >= 8, got {data.n}")
    tune_idx, est_idx = split_half(data.n, rng.derive("split"))
    half = subset(data, tune_idx)
    configs, losses, audit = _tune_all(spaces, half, model_kind, rng.derive("tune"), cv_folds,
                                       irm_g_fit, skip_singleton)
    return TuningOutcome(Scheme.SPLIT_SAMPLE, ModelKind(model_kind),
                         tuple(configs for _ in range(k)), tuple(losses for _ in range(k)),
                         estimation_indices=est_idx, irm_g_fit=irm_g_fit, audit=(audit,))


def split_sample_halves(n: int, rng: RngStream) -> tuple[NDArray, NDArray]:
    """The (tuning, estimation) halves :func:`tune_split_sample` uses for this stream."""
    return split_half(n, rng.derive("split"))


def tune_on_folds(spaces: SearchSpace | Mapping[str, SearchSpace], data: Dataset,
                  model_kind: ModelKind | str, partition: FoldPartition, rng: RngStream,
                  cv_folds: int = TUNING_CV_FOLDS, irm_g_fit: str = "pooled",
                  skip_singleton: bool = True) -> TuningOutcome:
    """Tune separately on each training complement of ``partition``."""
    configs, losses, audits = [], [], []
    for k in range(partition.k):
        comp = subset(data, partition.complement(k))
        c, l, a = _tune_all(spaces, comp, model_kind, rng.derive("fold", k), cv_folds,
                            irm_g_fit, skip_singleton)
        configs.append(c)
        losses.append(l)
        audits.append(a)
    return TuningOutcome(Scheme.ON_FOLDS, ModelKind(model_kind), tuple(configs), tuple(losses),
                         irm_g_fit=irm_g_fit, audit=tuple(audits))


def fixed_outcome(configs: Mapping[str, LearnerConfig], model_kind: ModelKind | str, k: int,
                  irm_g_fit: str = "pooled") -> TuningOutcome:
    """Use given configurations in every fold without any tuning."""
    return TuningOutcome(Scheme.FULL_SAMPLE, ModelKind(model_kind),
                         tuple(dict(configs) for _ in range(k)),
                         tuple({n: math.nan for n in configs} for _ in range(k)),
                         irm_g_fit=irm_g_fit)
