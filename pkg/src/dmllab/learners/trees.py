"""
Tree learners on the compiled CART kernel: single trees, bootstrap random
forests and gradient boosting with CV-selected round counts.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit

from ..core import RngStream, make_kfold
from . import _kernels
from .config import FittedModel, LearnerConfig, Task, check_xy

_BOOST_P_CLAMP = 1e-6
_SEED_MASK = (1 << 32) - 1


def _grow(xt, y, w, order, max_depth, min_leaf, mtry, seed) -> dict[str, NDArray]:
    feat, thr, left, right, value, weight = _kernels.build_tree(
        xt, y, w, order, int(max_depth), float(min_leaf), int(mtry), int(seed) & _SEED_MASK)
    return {"feature": feat, "threshold": thr, "left": left, "right": right, "value": value,
            "weight": weight}


def predict_one_tree(tree, x: NDArray) -> NDArray:
    return _kernels.predict_tree(x, tree["feature"], tree["threshold"], tree["left"],
                                 tree["right"], tree["value"])


def tree_depth(tree) -> int:
    d = _kernels.tree_leaf_depths(np.asarray(tree["feature"]), np.asarray(tree["left"]),
                                  np.asarray(tree["right"]))
    return int(d.max())


# =============================================================================
# SINGLE TREE AND FOREST
# =============================================================================

def fit_tree(x, y, max_depth: int, min_leaf: int = 1,
             task: Task | str = Task.REGRESSION) -> FittedModel:
    """Greedy CART tree; leaves predict the mean (class frequency for 0/1 targets)."""
    task = Task(task)
    cfg = LearnerConfig("tree", {"max_depth": max_depth, "min_leaf": min_leaf}, task)
    x, y = check_xy(x, y, task)
    xt = np.ascontiguousarray(x.T)
    order = _kernels.presort(xt)
    tree = _grow(xt, y, np.ones(x.shape[0]), order, cfg.int("max_depth"), cfg.int("min_leaf"), 0, 0)
    return FittedModel(cfg, {"trees": [tree]}, x.shape[1])


def fit_random_forest(x, y, max_depth: int, n_trees: int = 100, mtry: int = 0,
                      rng: RngStream | None = None, task: Task | str = Task.REGRESSION,
                      min_leaf: int = 5, bootstrap: bool = True) -> FittedModel:
    """Bagged CART trees with ``mtry`` candidate features per split.

    ``mtry = 0`` means ceil(sqrt(p)). Bootstrap resamples are encoded as
    integer row weights so a single presort serves every tree.
    """
    task = Task(task)
    cfg = LearnerConfig("random_forest", {"max_depth": max_depth, "n_trees": n_trees, "mtry": mtry,
                                          "min_leaf": min_leaf, "bootstrap": int(bool(bootstrap))},
                        task)
    x, y = check_xy(x, y, task)
    n, p = x.shape
    m = cfg.int("mtry") or math.ceil(math.sqrt(p))
    gen = (rng if rng is not None else RngStream(0)).generator()
    xt = np.ascontiguousarray(x.T)
    order = _kernels.presort(xt)
    trees = []
    for _ in range(cfg.int("n_trees")):
        if cfg.int("bootstrap"):
            w = np.bincount(gen.integers(0, n, n), minlength=n).astype(float)
        else:
            w = np.ones(n)
        seed = int(gen.integers(0, 1 << 32))
        trees.append(_grow(xt, y, w, order, cfg.int("max_depth"), cfg.int("min_leaf"), m, seed))
    return FittedModel(cfg, {"trees": trees}, p, {"mtry": m})


def predict_forest(params, x: NDArray, task: Task) -> NDArray:
    out = np.zeros(x.shape[0])
    for tree in params["trees"]:
        out += predict_one_tree(tree, x)
    out /= len(params["trees"])
    return np.clip(out, 0.0, 1.0) if task is Task.PROBABILITY else out


# =============================================================================
# GRADIENT BOOSTING
# =============================================================================

def _boost_init(y: NDArray, w: NDArray, task: Task) -> float:
    mean = float(np.sum(w * y) / np.sum(w))
    if task is Task.PROBABILITY:
        return float(logit(min(max(mean, _BOOST_P_CLAMP), 1.0 - _BOOST_P_CLAMP)))
    return mean


def _boost_prob(f: NDArray) -> NDArray:
    return np.clip(expit(f), _BOOST_P_CLAMP, 1.0 - _BOOST_P_CLAMP)


def _boost_loss(y: NDArray, f: NDArray, task: Task) -> float:
    if task is Task.PROBABILITY:
        p = _boost_prob(f)
        return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    return float(np.mean((y - f) ** 2))


def _residual(y: NDArray, f: NDArray, task: Task) -> NDArray:
    return y - _boost_prob(f) if task is Task.PROBABILITY else y - f


def fit_gradient_boosting(x, y, max_depth: int = 2, learning_rate: float = 0.1,
                          max_rounds: int = 100, early_stop_folds: int = 5,
                          rng: RngStream | None = None, task: Task | str = Task.REGRESSION,
                          patience: int = 10, min_leaf: int = 1) -> FittedModel:
    """Boosted shallow trees on squared loss or log-loss.

    With ``early_stop_folds >= 2`` every CV fold is boosted in lockstep
    (validation rows get zero weight) and the round count minimizing the
    mean validation loss is kept, stopping the scan after ``patience``
    rounds without improvement. The ensemble is then refit on all rows.
    With ``early_stop_folds = 0`` exactly ``max_rounds`` rounds are used.
    """
    task = Task(task)
    cfg = LearnerConfig("gradient_boosting",
                        {"max_depth": max_depth, "learning_rate": learning_rate,
                         "max_rounds": max_rounds, "early_stop_folds": early_stop_folds,
                         "patience": patience, "min_leaf": min_leaf}, task)
    x, y = check_xy(x, y, task)
    n, p = x.shape
    depth, lr = cfg.int("max_depth"), float(cfg.get("learning_rate"))
    leaf, rounds = cfg.int("min_leaf"), cfg.int("max_rounds")
    xt = np.ascontiguousarray(x.T)
    order = _kernels.presort(xt)
    info: dict = {}

    k = cfg.int("early_stop_folds")
    if k >= 2 and rounds > 0 and n >= 2 * k:
        part = make_kfold(n, k, rng if rng is not None else RngStream(0))
        weights, val_idx, scores = [], [], []
        for f in range(k):
            w = np.ones(n)
            w[part.folds[f]] = 0.0
            weights.append(w)
            val_idx.append(part.folds[f])
            scores.append(np.full(n, _boost_init(y, w, task)))
        curve = [float(np.mean([_boost_loss(y[v], s[v], task) for v, s in zip(val_idx, scores)]))]
        best, best_round = curve[0], 0
        for r in range(1, rounds + 1):
            for f in range(k):
                tree = _grow(xt, _residual(y, scores[f], task), weights[f], order, depth, leaf, 0, 0)
                scores[f] += lr * predict_one_tree(tree, x)
            curve.append(float(np.mean([_boost_loss(y[v], s[v], task)
                                        for v, s in zip(val_idx, scores)])))
            if curve[-1] < best:
                best, best_round = curve[-1], r
            elif r - best_round >= cfg.int("patience"):
                break
        rounds = best_round
        info["cv_loss"] = np.array(curve)

    ones = np.ones(n)
    init = _boost_init(y, ones, task)
    score = np.full(n, init)
    train = [_boost_loss(y, score, task)]
    trees = []
    for _ in range(rounds):
        tree = _grow(xt, _residual(y, score, task), ones, order, depth, leaf, 0, 0)
        score += lr * predict_one_tree(tree, x)
        trees.append(tree)
        train.append(_boost_loss(y, score, task))
    info["n_rounds"] = rounds
    info["train_loss"] = np.array(train)
    return FittedModel(cfg, {"init": init, "learning_rate": lr, "trees": trees}, p, info)


def predict_boosting(params, x: NDArray, task: Task) -> NDArray:
    f = np.full(x.shape[0], float(params["init"]))
    for tree in params["trees"]:
        f += params["learning_rate"] * predict_one_tree(tree, x)
    return _boost_prob(f) if task is Task.PROBABILITY else f
