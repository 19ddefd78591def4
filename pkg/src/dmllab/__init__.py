"""Double machine learning laboratory.

Cross-fitted PLR and IRM estimators, tunable nuisance learners, three
tuning schemes, synthetic data generators and a seeded Monte Carlo harness.
"""

__version__ = "0.1.0"

from .core import (Dataset, DgpTruth, FoldPartition, ModelKind, RngStream, Scheme,  # noqa: E402
                   TreatmentKind, make_kfold, make_stratified_kfold, read_csv, write_csv)
from .dgp import DgpSpec, GeneratedData, empirical_snr, gen_acic, gen_bch, oracle_estimate  # noqa: E402
from .dml import (CausalEstimate, NuisancePredictions, NuisanceQuality,  # noqa: E402
                  cross_fit_nuisances, irm_ate_estimate, nuisance_quality, plr_estimate, run_dml)
from .learners import FittedModel, LearnerConfig, Task, fit, predict  # noqa: E402
from .metrics import (MetricsRecord, RepetitionResult, aggregate,  # noqa: E402
                      select_causal_model, select_learner_combined_loss, select_learner_y_loss)
from .tuning import SearchSpace, default_space, grid_search_cv  # noqa: E402

__all__ = [
    "CausalEstimate", "Dataset", "DgpSpec", "DgpTruth", "FittedModel", "FoldPartition",
    "GeneratedData", "LearnerConfig", "MetricsRecord", "ModelKind", "NuisancePredictions",
    "NuisanceQuality", "RepetitionResult", "RngStream", "Scheme", "SearchSpace", "Task",
    "TreatmentKind", "aggregate", "cross_fit_nuisances", "default_space", "empirical_snr", "fit",
    "gen_acic", "gen_bch", "grid_search_cv", "irm_ate_estimate", "make_kfold",
    "make_stratified_kfold", "nuisance_quality", "oracle_estimate", "plr_estimate", "predict",
    "read_csv", "run_dml", "select_causal_model", "select_learner_combined_loss",
    "select_learner_y_loss", "write_csv",
]
