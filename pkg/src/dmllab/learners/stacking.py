"""Stacked generalization with a non-negative, sum-to-one linear combiner."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import nnls

from ..core import RngStream, make_kfold
from .config import FittedModel, LearnerConfig, Task, check_xy


def stack_weights(z: NDArray, y: NDArray) -> tuple[NDArray, bool]:
    """NNLS weights of the columns of ``z`` for ``y``, renormalized to sum 1.

    Returns ``(weights, fallback)``; all-zero NNLS weights fall back to the
    uniform combination.
    """
    w, _ = nnls(z, y)
    total = float(w.sum())
    if not np.isfinite(total) or total <= 0.0:
        return np.full(z.shape[1], 1.0 / z.shape[1]), True
    return w / total, False


def fit_stacking(base: Sequence[LearnerConfig], x, y, folds: int = 5,
                 rng: RngStream | None = None, task: Task | str = Task.REGRESSION) -> FittedModel:
    """Combine base learners by NNLS on their out-of-fold predictions.

    Each base learner's stream is keyed by its configuration, so duplicated
    bases see identical randomness. Bases are refit on all rows for
    prediction.
    """
    from .api import fit, predict

    task = Task(task)
    base = tuple(b if b.task is task else LearnerConfig(b.family, b.hyperparams, task, b.base)
                 for b in base)
    cfg = LearnerConfig("stacking", {"folds": folds}, task, base)
    x, y = check_xy(x, y, task)
    rng = rng if rng is not None else RngStream(0)
    part = make_kfold(x.shape[0], cfg.int("folds"), rng.derive("stack-folds"))
    z = np.zeros((x.shape[0], len(base)))
    for j, b in enumerate(base):
        for k in range(part.k):
            tr = part.complement(k)
            model = fit(b, x[tr], y[tr], rng.derive("base", b.describe(), "fold", k))
            z[part.folds[k], j] = predict(model, x[part.folds[k]])
    weights, fallback = stack_weights(z, y)
    if fallback:
        warnings.warn("stacking: all NNLS weights are zero; using uniform weights",
                      RuntimeWarning, stacklevel=2)
    models = [fit(b, x, y, rng.derive("base", b.describe(), "full")) for b in base]
    return FittedModel(cfg, {"weights": weights, "models": models}, x.shape[1],
                       {"fallback": fallback, "oof_predictions": z})


def predict_stacking(params, x: NDArray, task: Task) -> NDArray:
    from .api import predict

    out = np.zeros(x.shape[0])
    for w, model in zip(params["weights"], params["models"]):
        out += w * predict(model, x)
    return np.clip(out, 0.0, 1.0) if task is Task.PROBABILITY else out
