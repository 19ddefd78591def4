"""
Linear learners: mean, OLS, Newton logistic regression, and the L1 family
(coordinate-descent lasso, IRLS L1-logistic, cross-validated penalty).
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from ..core import RngStream, make_kfold
from ..errors import InvalidArgumentError
from . import _kernels
from .config import FittedModel, LearnerConfig, Task, check_xy

_P_EPS = 1e-15


def clamp_probability(p: NDArray) -> NDArray:
    """Keep probabilities strictly inside (0, 1)."""
    return np.clip(p, _P_EPS, 1.0 - _P_EPS)


def _linear_predict(params, x: NDArray, task: Task) -> NDArray:
    eta = params["intercept"] + x @ params["coef"]
    return clamp_probability(expit(eta)) if task is Task.PROBABILITY else eta


# =============================================================================
# MEAN AND OLS
# =============================================================================

def fit_mean(x, y, task: Task | str = Task.REGRESSION) -> FittedModel:
    x, y = check_xy(x, y, Task(task))
    cfg = LearnerConfig("mean", {}, Task(task))
    return FittedModel(cfg, {"value": float(np.mean(y))}, x.shape[1])


def fit_ols(x, y) -> FittedModel:
    """Least squares with an intercept; minimum-norm solution when rank deficient."""
    x, y = check_xy(x, y, Task.REGRESSION)
    design = np.column_stack([np.ones(x.shape[0]), x])
    sol, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    return FittedModel(LearnerConfig("ols"), {"intercept": float(sol[0]), "coef": sol[1:]},
                       x.shape[1], {"rank": int(rank)})


# =============================================================================
# LOGISTIC
# =============================================================================

def logistic_loglik(beta: NDArray, x: NDArray, y: NDArray) -> float:
    """Mean log-likelihood; ``beta[0]`` is the intercept."""
    eta = beta[0] + x @ beta[1:]
    return float(np.mean(y * eta - np.logaddexp(0.0, eta)))


def logistic_gradient(beta: NDArray, x: NDArray, y: NDArray) -> NDArray:
    """Gradient of :func:`logistic_loglik`."""
    r = y - expit(beta[0] + x @ beta[1:])
    return np.concatenate([[r.mean()], x.T @ r / x.shape[0]])


def fit_logistic(x, y, max_iter: int = 100, tol: float = 1e-8) -> FittedModel:
    """Maximum-likelihood logistic regression by damped Newton steps.

    Stops once the max-norm of the mean-loglik gradient is at most ``tol``.
    Under (quasi-)separation the MLE does not exist; the last iterate is
    returned with ``info['separation'] = True`` and outputs stay finite.
    """
    x, y = check_xy(x, y, Task.PROBABILITY)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise InvalidArgumentError("logistic regression needs 0/1 targets")
    if y.min() == y.max():
        raise InvalidArgumentError("logistic regression needs both classes")
    n, p = x.shape
    design = np.column_stack([np.ones(n), x])
    beta = np.zeros(p + 1)
    ybar = y.mean()
    beta[0] = np.log(ybar / (1.0 - ybar))
    ll = logistic_loglik(beta, x, y)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = expit(design @ beta)
        grad = design.T @ (y - prob) / n
        if np.max(np.abs(grad)) <= tol:
            converged = True
            it -= 1
            break
        wts = prob * (1.0 - prob)
        hess = (design * wts[:, None]).T @ design / n
        step = np.linalg.lstsq(hess + 1e-12 * np.eye(p + 1), grad, rcond=None)[0]
        # step halving keeps the likelihood monotone
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            ll_c = logistic_loglik(cand, x, y)
            if ll_c >= ll - 1e-15:
                break
            t *= 0.5
        else:
            break
        beta, ll = cand, ll_c
    else:
        prob = expit(design @ beta)
        converged = np.max(np.abs(design.T @ (y - prob) / n)) <= tol

    eta = design @ beta
    separated = (not converged) or bool(np.max(np.abs(eta)) > 30.0)
    if separated:
        warnings.warn("logistic regression: possible separation; returning last iterate",
                      RuntimeWarning, stacklevel=2)
    grad = logistic_gradient(beta, x, y)
    return FittedModel(LearnerConfig("logistic", {"max_iter": max_iter, "tol": tol}, Task.PROBABILITY),
                       {"intercept": float(beta[0]), "coef": beta[1:]}, p,
                       {"iterations": it, "separation": separated,
                        "gradient_max": float(np.max(np.abs(grad)))})


# =============================================================================
# LASSO
# =============================================================================

def standardize(x: NDArray) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Centre and scale columns by their population sd.

    Returns ``(xs, mean, scale, ok)``; zero-variance columns become all-zero
    and are flagged ``ok = False`` so their slopes stay at 0.
    """
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    ok = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    scale = np.where(ok, sd, 1.0)
    xs = (x - mu) / scale
    xs[:, ~ok] = 0.0
    return np.ascontiguousarray(xs), mu, scale, ok


def lambda_max(xs: NDArray, y: NDArray) -> float:
    """Smallest penalty at which every slope is exactly zero."""
    return float(np.max(np.abs(xs.T @ (y - y.mean()))) / xs.shape[0])


def _l1_logistic(xs, xt, y, lam, beta, b0, tol, max_sweeps, max_outer=100):
    """IRLS outer loop around weighted CD; ``beta`` is updated in place."""
    n = xs.shape[0]

    def objective(b0_, beta_):
        eta = b0_ + xs @ beta_
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta) + lam * np.sum(np.abs(beta_)))

    obj = objective(b0, beta)
    for _ in range(max_outer):
        eta = b0 + xs @ beta
        prob = expit(eta)
        w = np.maximum(prob * (1.0 - prob), 1e-5)
        z = eta + (y - prob) / w
        nb = beta.copy()
        nb0, _, _ = _kernels.lasso_cd(xt, z, w, lam, nb, b0, tol, max_sweeps)
        t = 1.0
        while True:
            cb = beta + t * (nb - beta)
            cb0 = b0 + t * (nb0 - b0)
            cobj = objective(cb0, cb)
            if cobj <= obj + 1e-14 or t < 1e-4:
                break
            t *= 0.5
        change = max(abs(cb0 - b0), float(np.max(np.abs(cb - beta), initial=0.0)))
        gain = obj - cobj
        beta[:] = cb
        b0, obj = cb0, cobj
        # coefficients can creep for many steps near separation while the objective is flat
        if change < tol or gain <= 1e-3 * tol * (1.0 + abs(obj)):
            break
    r = y - expit(b0 + xs @ beta)
    g = xs.T @ r / n
    kkt = np.where(beta == 0.0, np.abs(g) - lam, np.abs(g - lam * np.sign(beta)))
    return b0, float(max(np.max(kkt, initial=0.0), abs(r.mean())))


def _solve_path(xs, y, lambdas, task, tol, max_sweeps):
    """Warm-started solutions for a decreasing penalty sequence."""
    n, p = xs.shape
    beta = np.zeros(p)
    b0 = float(y.mean())
    if task is Task.PROBABILITY:
        yb = min(max(b0, 1e-6), 1 - 1e-6)
        b0 = float(np.log(yb / (1 - yb)))
    w = np.ones(n)
    out = []
    if task is Task.REGRESSION and n >= p:
        gram = xs.T @ xs / n
        c = xs.T @ (y - b0) / n
        for lam in lambdas:
            kkt, _ = _kernels.lasso_cd_gram(gram, c, float(lam), beta, tol, max_sweeps)
            out.append((b0, beta.copy(), kkt))
        return out
    xt = np.ascontiguousarray(xs.T)
    for lam in lambdas:
        if task is Task.PROBABILITY:
            b0, kkt = _l1_logistic(xs, xt, y, float(lam), beta, b0, tol, max_sweeps)
        else:
            b0, kkt, _ = _kernels.lasso_cd(xt, y, w, float(lam), beta, b0, tol, max_sweeps)
        out.append((b0, beta.copy(), kkt))
    return out


def _destandardize(b0, beta, mu, scale, ok):
    coef = np.where(ok, beta / scale, 0.0)
    return float(b0 - coef @ mu), coef


def fit_lasso(x, y, lam: float, tol: float = 1e-6, max_sweeps: int = 10000,
              task: Task | str = Task.REGRESSION) -> FittedModel:
    """L1-penalized least squares (or L1-logistic for the probability task).

    Objective ``(1/2n)||y - b0 - Xs beta||^2 + lam * ||beta||_1`` on
    standardized columns ``Xs``; coefficients are reported on the original
    scale. The probability task replaces the squared loss by the mean
    negative log-likelihood.
    """
    task = Task(task)
    cfg = LearnerConfig("lasso", {"lambda": lam, "tol": tol, "max_sweeps": max_sweeps}, task)
    x, y = check_xy(x, y, task)
    xs, mu, scale, ok = standardize(x)
    ((b0, beta, kkt),) = _solve_path(xs, y, [cfg.get("lambda")], task, tol, max_sweeps)
    intercept, coef = _destandardize(b0, beta, mu, scale, ok)
    return FittedModel(cfg, {"intercept": intercept, "coef": coef}, x.shape[1],
                       {"lambda": float(lam), "kkt": float(kkt), "beta_std": beta,
                        "intercept_std": float(b0)})


def _loss(y, pred, task):
    if task is Task.PROBABILITY:
        p = np.clip(pred, 1e-15, 1 - 1e-15)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    return float(np.mean((y - pred) ** 2))


def fit_cv_lasso(x, y, folds: int = 5, grid_size: int = 100, rng: RngStream | None = None,
                 task: Task | str = Task.REGRESSION, eps: float = 1e-3, tol: float = 1e-6,
                 max_sweeps: int = 10000) -> FittedModel:
    """Lasso with the penalty chosen by K-fold CV on a log-spaced grid.

    The grid runs from ``lambda_max`` of the full sample down to
    ``eps * lambda_max``. Each fold standardizes its own training part.
    Ties in mean CV loss keep the larger penalty.
    """
    task = Task(task)
    cfg = LearnerConfig("cv_lasso", {"folds": folds, "grid_size": grid_size, "eps": eps,
                                     "tol": tol, "max_sweeps": max_sweeps}, task)
    x, y = check_xy(x, y, task)
    rng = rng if rng is not None else RngStream(0)
    xs, mu, scale, ok = standardize(x)
    lmax = lambda_max(xs, y)
    if lmax <= 0.0:
        # nothing to select: intercept-only fit
        return FittedModel(cfg, {"intercept": float(y.mean()) if task is Task.REGRESSION
                                 else float(np.log(y.mean() / (1 - y.mean()))) if 0 < y.mean() < 1
                                 else 0.0,
                                 "coef": np.zeros(x.shape[1])}, x.shape[1],
                           {"lambda": 0.0, "lambdas": np.zeros(1), "cv_loss": np.zeros(1)})
    lambdas = lmax * np.logspace(0.0, np.log10(eps), grid_size)
    part = make_kfold(x.shape[0], folds, rng)
    losses = np.zeros((folds, grid_size))
    for k in range(folds):
        tr = part.complement(k)
        va = part.folds[k]
        xs_k, mu_k, sc_k, ok_k = standardize(x[tr])
        path = _solve_path(xs_k, y[tr], lambdas, task, tol, max_sweeps)
        for g, (b0, beta, _) in enumerate(path):
            intercept, coef = _destandardize(b0, beta, mu_k, sc_k, ok_k)
            pred = _linear_predict({"intercept": intercept, "coef": coef}, x[va], task)
            losses[k, g] = _loss(y[va], pred, task)
    curve = losses.mean(axis=0)
    best = int(np.argmin(curve))
    path = _solve_path(xs, y, lambdas[: best + 1], task, tol, max_sweeps)
    b0, beta, kkt = path[-1]
    intercept, coef = _destandardize(b0, beta, mu, scale, ok)
    return FittedModel(cfg, {"intercept": intercept, "coef": coef}, x.shape[1],
                       {"lambda": float(lambdas[best]), "lambda_index": best, "lambdas": lambdas,
                        "cv_loss": curve, "kkt": float(kkt)})
