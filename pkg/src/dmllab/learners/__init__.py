"""Nuisance learners: linear, L1, tree ensembles and stacking."""

from .api import count_fits, fit, model_from_json, model_to_json, predict
from .config import FAMILIES, FittedModel, LearnerConfig, Task
from .linear import (fit_cv_lasso, fit_lasso, fit_logistic, fit_mean, fit_ols, lambda_max,
                     logistic_gradient, logistic_loglik, standardize)
from .stacking import fit_stacking, stack_weights
from .trees import fit_gradient_boosting, fit_random_forest, fit_tree, tree_depth

__all__ = [
    "FAMILIES", "FittedModel", "LearnerConfig", "Task", "count_fits", "fit", "fit_cv_lasso",
    "fit_gradient_boosting", "fit_lasso", "fit_logistic", "fit_mean", "fit_ols",
    "fit_random_forest", "fit_stacking", "fit_tree", "lambda_max", "logistic_gradient",
    "logistic_loglik", "model_from_json", "model_to_json", "predict", "stack_weights",
    "standardize", "tree_depth",
]
