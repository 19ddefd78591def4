"""Config-driven fitting, prediction, fit counting and JSON serialization."""

from __future__ import annotations

import contextlib
import json
from typing import Any, Iterator

import numpy as np
from numpy.typing import NDArray

from ..core import RngStream, as_stream
from ..errors import InvalidArgumentError
from . import linear, stacking, trees
from .config import FittedModel, LearnerConfig, Task, check_x

SERIAL_FORMAT = "dmllab.model"
SERIAL_VERSION = 1

_fit_count = 0


@contextlib.contextmanager
def count_fits() -> Iterator[list[int]]:
    """Count calls to :func:`fit` inside the block; the count is ``box[0]`` on exit."""
    global _fit_count
    start = _fit_count
    box = [0]
    try:
        yield box
    finally:
        box[0] = _fit_count - start


def fit(config: LearnerConfig, x: Any, y: Any, rng: RngStream | int | None = None) -> FittedModel:
    """Fit the learner described by ``config``."""
    global _fit_count
    _fit_count += 1
    rng = as_stream(rng)
    hp, task = config.hyperparams, config.task
    fam = config.family
    if fam == "mean":
        model = linear.fit_mean(x, y, task)
    elif fam == "ols":
        model = linear.fit_ols(x, y)
    elif fam == "logistic":
        model = linear.fit_logistic(x, y, hp["max_iter"], hp["tol"])
    elif fam == "lasso":
        model = linear.fit_lasso(x, y, hp["lambda"], hp["tol"], hp["max_sweeps"], task)
    elif fam == "cv_lasso":
        model = linear.fit_cv_lasso(x, y, hp["folds"], hp["grid_size"], rng, task, hp["eps"],
                                    hp["tol"], hp["max_sweeps"])
    elif fam == "tree":
        model = trees.fit_tree(x, y, hp["max_depth"], hp["min_leaf"], task)
    elif fam == "random_forest":
        model = trees.fit_random_forest(x, y, hp["max_depth"], hp["n_trees"], hp["mtry"], rng, task,
                                        hp["min_leaf"], bool(hp["bootstrap"]))
    elif fam == "gradient_boosting":
        model = trees.fit_gradient_boosting(x, y, hp["max_depth"], hp["learning_rate"],
                                            hp["max_rounds"], hp["early_stop_folds"], rng, task,
                                            hp["patience"], hp["min_leaf"])
    elif fam == "stacking":
        model = stacking.fit_stacking(config.base, x, y, hp["folds"], rng, task)
    else:  # pragma: no cover - LearnerConfig rejects unknown families
        raise InvalidArgumentError(f"unknown family {fam!r}")
    assert model.config == config
    return model


def predict(model: FittedModel, x: Any) -> NDArray:
    """Predictions of ``model`` on the rows of ``x``."""
    x = check_x(x)
    if x.shape[1] != model.feature_count:
        raise InvalidArgumentError(
            f"x has {x.shape[1]} columns, model was fit on {model.feature_count}")
    fam, task, params = model.config.family, model.task, model.parameters
    if fam == "mean":
        return np.full(x.shape[0], float(params["value"]))
    if fam in ("ols", "logistic", "lasso", "cv_lasso"):
        return linear._linear_predict(params, x, task)
    if fam in ("tree", "random_forest"):
        return trees.predict_forest(params, x, task)
    if fam == "gradient_boosting":
        return trees.predict_boosting(params, x, task)
    return stacking.predict_stacking(params, x, task)


# =============================================================================
# SERIALIZATION
# =============================================================================

def _encode(obj: Any) -> Any:
    if isinstance(obj, FittedModel):
        return {"__model__": model_to_dict(obj)}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, dict) or hasattr(obj, "items"):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _decode(obj: Any) -> Any:
    if isinstance(obj, dict):
        if "__model__" in obj:
            return model_from_dict(obj["__model__"])
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def model_to_dict(model: FittedModel) -> dict:
    return {"format": SERIAL_FORMAT, "version": SERIAL_VERSION,
            "config": model.config.to_dict(), "feature_count": model.feature_count,
            "parameters": _encode(model.parameters)}


def model_from_dict(doc: dict) -> FittedModel:
    if doc.get("format") != SERIAL_FORMAT or doc.get("version") != SERIAL_VERSION:
        raise InvalidArgumentError(
            f"unsupported model document {doc.get('format')!r} v{doc.get('version')!r}")
    return FittedModel(LearnerConfig.from_dict(doc["config"]), _decode(doc["parameters"]),
                       int(doc["feature_count"]))


def model_to_json(model: FittedModel) -> str:
    """Versioned JSON document with family, hyperparameters and parameters."""
    return json.dumps(model_to_dict(model), sort_keys=True)


def model_from_json(text: str) -> FittedModel:
    return model_from_dict(json.loads(text))


__all__ = ["fit", "predict", "count_fits", "model_to_json", "model_from_json", "Task"]
