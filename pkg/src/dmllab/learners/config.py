"""Learner configurations, fitted-model containers and shared input checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Any, Mapping

import numpy as np
from numpy.typing import NDArray

from ..errors import InvalidArgumentError


class Task(str, Enum):
    REGRESSION = "regression"
    PROBABILITY = "probability"


# family -> (required keys, defaults for optional keys)
FAMILY_PARAMS: dict[str, tuple[frozenset, dict[str, float]]] = {
    "mean": (frozenset(), {}),
    "ols": (frozenset(), {}),
    "logistic": (frozenset(), {"max_iter": 100, "tol": 1e-8}),
    "lasso": (frozenset({"lambda"}), {"tol": 1e-6, "max_sweeps": 10000}),
    "cv_lasso": (frozenset(), {"folds": 5, "grid_size": 100, "eps": 1e-3,
                               "tol": 1e-6, "max_sweeps": 10000}),
    "tree": (frozenset({"max_depth"}), {"min_leaf": 1}),
    "random_forest": (frozenset({"max_depth"}), {"n_trees": 100, "mtry": 0, "min_leaf": 5,
                                                 "bootstrap": 1}),
    "gradient_boosting": (frozenset(), {"max_depth": 2, "learning_rate": 0.1, "max_rounds": 100,
                                        "early_stop_folds": 5, "patience": 10, "min_leaf": 1}),
    "stacking": (frozenset(), {"folds": 5}),
}
FAMILIES = tuple(FAMILY_PARAMS)

_INTEGER_KEYS = frozenset({"max_depth", "min_leaf", "n_trees", "mtry", "bootstrap", "max_rounds",
                           "early_stop_folds", "patience", "folds", "grid_size", "max_iter",
                           "max_sweeps"})

# key -> (lower bound, inclusive?)
_LOWER = {"lambda": (0.0, True), "max_depth": (0, True), "min_leaf": (1, True),
          "n_trees": (1, True), "mtry": (0, True), "learning_rate": (0.0, False),
          "max_rounds": (0, True), "patience": (1, True), "folds": (2, True),
          "grid_size": (1, True), "eps": (0.0, False), "tol": (0.0, False),
          "max_iter": (1, True), "max_sweeps": (1, True), "early_stop_folds": (0, True)}

_REGRESSION_ONLY = frozenset({"ols"})
_PROBABILITY_ONLY = frozenset({"logistic"})


@dataclass(frozen=True)
class LearnerConfig:
    """A learner family with a complete hyperparameter map and a task.

    Missing optional keys are filled with family defaults; unknown keys and
    missing required keys are rejected. ``base`` lists the stacked learners
    and must be empty for every other family.
    """

    family: str
    hyperparams: Mapping[str, float] = field(default_factory=dict)
    task: Task = Task.REGRESSION
    base: tuple["LearnerConfig", ...] = ()

    def __post_init__(self) -> None:
        if self.family not in FAMILY_PARAMS:
            raise InvalidArgumentError(f"unknown learner family {self.family!r}")
        task = Task(self.task)
        object.__setattr__(self, "task", task)
        if task is Task.PROBABILITY and self.family in _REGRESSION_ONLY:
            raise InvalidArgumentError(f"{self.family} does not support the probability task")
        if task is Task.REGRESSION and self.family in _PROBABILITY_ONLY:
            raise InvalidArgumentError(f"{self.family} does not support the regression task")

        required, defaults = FAMILY_PARAMS[self.family]
        given = dict(self.hyperparams)
        unknown = set(given) - required - set(defaults)
        if unknown:
            raise InvalidArgumentError(f"{self.family}: unknown hyperparameters {sorted(unknown)}")
        missing = required - set(given)
        if missing:
            raise InvalidArgumentError(f"{self.family}: missing hyperparameters {sorted(missing)}")
        full = {**defaults, **given}
        for key, val in full.items():
            full[key] = _check_value(self.family, key, val)
        if self.family == "gradient_boosting" and full["early_stop_folds"] == 1:
            raise InvalidArgumentError("early_stop_folds must be 0 (off) or >= 2")
        if self.family == "cv_lasso" and full["eps"] >= 1.0:
            raise InvalidArgumentError("cv_lasso eps must lie in (0, 1)")
        object.__setattr__(self, "hyperparams", MappingProxyType(dict(sorted(full.items()))))

        base = tuple(self.base)
        if self.family == "stacking":
            if not base:
                raise InvalidArgumentError("stacking needs at least one base learner")
            for b in base:
                if not isinstance(b, LearnerConfig):
                    raise InvalidArgumentError("stacking base entries must be LearnerConfig")
                if b.task is not task:
                    raise InvalidArgumentError("stacking base learners must share the stack's task")
        elif base:
            raise InvalidArgumentError(f"{self.family} takes no base learners")
        object.__setattr__(self, "base", base)

    # hashing by value (the mapping proxy itself is unhashable)
    def key(self) -> tuple:
        return (self.family, self.task.value, tuple(self.hyperparams.items()),
                tuple(b.key() for b in self.base))

    def __hash__(self) -> int:
        return hash(self.key())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LearnerConfig) and self.key() == other.key()

    def get(self, name: str) -> float:
        return self.hyperparams[name]

    def int(self, name: str) -> int:
        return int(self.hyperparams[name])

    def replace(self, **hyperparams: float) -> "LearnerConfig":
        return LearnerConfig(self.family, {**self.hyperparams, **hyperparams}, self.task, self.base)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"family": self.family, "task": self.task.value,
                               "hyperparams": dict(self.hyperparams)}
        if self.base:
            out["base"] = [b.to_dict() for b in self.base]
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LearnerConfig":
        base = tuple(cls.from_dict(b) for b in d.get("base", ()))
        return cls(d["family"], dict(d.get("hyperparams", {})), Task(d.get("task", "regression")), base)

    def describe(self) -> str:
        hp = ",".join(f"{k}={_fmt(v)}" for k, v in self.hyperparams.items())
        inner = "" if not self.base else "[" + ";".join(b.describe() for b in self.base) + "]"
        return f"{self.family}({hp}){inner}"


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _check_value(family: str, key: str, val: object) -> float | int:
    try:
        f = float(val)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise InvalidArgumentError(f"{family}.{key} must be numeric, got {val!r}") from None
    if not math.isfinite(f):
        raise InvalidArgumentError(f"{family}.{key} must be finite")
    if key in _INTEGER_KEYS:
        if not f.is_integer():
            raise InvalidArgumentError(f"{family}.{key} must be an integer, got {val!r}")
        f = int(f)
    if key in _LOWER:
        lo, inclusive = _LOWER[key]
        if f < lo or (not inclusive and f == lo):
            raise InvalidArgumentError(f"{family}.{key}={val!r} is out of range")
    return f


# =============================================================================
# FITTED MODEL
# =============================================================================

@dataclass(frozen=True)
class FittedModel:
    """Learned state of one learner.

    ``parameters`` holds what prediction needs (read-only arrays, tree
    lists, nested base models); ``info`` holds fit diagnostics such as CV
    curves, the selected penalty or round count, and warning flags.
    """

    config: LearnerConfig
    parameters: Mapping[str, Any]
    feature_count: int
    info: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "parameters", MappingProxyType(_freeze(dict(self.parameters))))
        object.__setattr__(self, "info", MappingProxyType(_freeze(dict(self.info))))

    @property
    def task(self) -> Task:
        return self.config.task


def _freeze(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        arr = obj.copy()
        arr.setflags(write=False)
        return arr
    if isinstance(obj, dict):
        return {k: _freeze(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return tuple(_freeze(v) for v in obj)
    if isinstance(obj, tuple):
        return tuple(_freeze(v) for v in obj)
    return obj


# =============================================================================
# INPUT CHECKS
# =============================================================================

def check_x(x: Any, name: str = "x") -> NDArray:
    arr = np.ascontiguousarray(np.asarray(x, dtype=float))
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidArgumentError(f"{name} has no rows")
    if arr.shape[1] == 0:
        raise InvalidArgumentError(f"{name} has no columns")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def check_xy(x: Any, y: Any, task: Task) -> tuple[NDArray, NDArray]:
    xa = check_x(x)
    ya = np.ascontiguousarray(np.asarray(y, dtype=float))
    if ya.ndim != 1 or ya.shape[0] != xa.shape[0]:
        raise InvalidArgumentError(f"y must be 1-d with {xa.shape[0]} entries, got shape {ya.shape}")
    if not np.all(np.isfinite(ya)):
        raise InvalidArgumentError("y contains non-finite values")
    if Task(task) is Task.PROBABILITY and np.any((ya < 0.0) | (ya > 1.0)):
        raise InvalidArgumentError("probability-task targets must lie in [0, 1]")
    return xa, ya
