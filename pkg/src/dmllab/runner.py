"""
Monte Carlo harness: seeded repetitions over a grid of (model, learner,
scheme) cells, persisted as flat CSV plus a JSON manifest.

Every cell draws its randomness from a stream keyed by
``(master_seed, rep, dgp, model, learner, scheme)``, so adding or removing
a cell never shifts another cell's draws, and repetitions can run in any
order on any number of workers with byte-identical output.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .core import ModelKind, RngStream, Scheme
from .dgp import DgpSpec, GeneratedData, calibrate, generate, oracle_estimate
from .dml import (DEFAULT_CLIP, DEFAULT_LEVEL, CausalEstimate, NuisancePredictions,
                  nuisance_quality, run_dml)
from .errors import DmlLabError, InvalidArgumentError
from .learners import LearnerConfig, Task, lambda_max, standardize
from .metrics import (MetricsRecord, RepetitionResult, aggregate_all, select_causal_model,
                      selected_results, write_aggregate_csv)
from .tuning import LEARNER_ORDER, SearchSpace, default_space, fixed_outcome

log = logging.getLogger("dmllab")

RESULT_COLUMNS = ("rep_id", "dgp", "model", "learner", "scheme", "theta_hat", "std_error",
                  "ci_low", "ci_high", "theta0", "oracle_theta_hat", "rmse_m", "rmse_ell", "rmse_g",
                  "combined_loss", "predictive_loss_y", "error_code")
ORACLE = "oracle"
FAILURE_SHARE = 0.10


# =============================================================================
# CONFIGURATION
# =============================================================================

@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo experiment.

    ``learners`` maps a label to its search space. In JSON it may be a list
    of built-in labels or a mapping from label to a search-space document.
    """

    dgp: DgpSpec
    models: tuple[str, ...] = ("plr",)
    learners: Mapping[str, SearchSpace] = field(default_factory=dict)
    schemes: tuple[str, ...] = ("full_sample",)
    k_folds: int = 5
    reps: int = 20
    master_seed: int = 0
    clip: float = DEFAULT_CLIP
    level: float = DEFAULT_LEVEL
    workers: int = 1
    output_dir: str = "results"
    aggregation: str = "pooled"
    irm_g_fit: str = "pooled"

    def __post_init__(self) -> None:
        models = tuple(ModelKind(m).value for m in self.models)
        schemes = tuple(Scheme(s).value for s in self.schemes)
        if not models or not schemes:
            raise InvalidArgumentError("need at least one model and one scheme")
        learners = dict(self.learners)
        if not learners:
            raise InvalidArgumentError("need at least one learner")
        for label, space in learners.items():
            if not isinstance(space, SearchSpace):
                raise InvalidArgumentError(f"learner {label!r} has no search space")
            if label == ORACLE:
                raise InvalidArgumentError("'oracle' is a reserved learner label")
        if int(self.reps) < 1:
            raise InvalidArgumentError(f"reps must be >= 1, got {self.reps}")
        if not 0.0 < float(self.level) < 1.0:
            raise InvalidArgumentError(f"level must lie in (0, 1), got {self.level}")
        if int(self.k_folds) < 2:
            raise InvalidArgumentError(f"k_folds must be >= 2, got {self.k_folds}")
        if int(self.workers) < 1:
            raise InvalidArgumentError(f"workers must be >= 1, got {self.workers}")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "schemes", schemes)
        object.__setattr__(self, "learners", learners)

    @property
    def dgp_label(self) -> str:
        return self.dgp.label

    def to_dict(self) -> dict:
        return {"dgp": self.dgp.to_dict(), "models": list(self.models),
                "learners": {k: v.to_dict() for k, v in self.learners.items()},
                "schemes": list(self.schemes), "k_folds": self.k_folds, "reps": self.reps,
                "master_seed": self.master_seed, "clip": self.clip, "level": self.level,
                "workers": self.workers, "output_dir": self.output_dir,
                "aggregation": self.aggregation, "irm_g_fit": self.irm_g_fit}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        dgp = d.pop("dgp", {"kind": "bch"})
        dgp = dgp if isinstance(dgp, DgpSpec) else DgpSpec.from_dict(dgp)
        raw = d.pop("learners", ["lasso"])
        if isinstance(raw, Mapping):
            learners = {k: v if isinstance(v, SearchSpace) else
                        (default_space(v) if isinstance(v, str) else SearchSpace.from_dict(v))
                        for k, v in raw.items()}
        else:
            learners = {label: default_space(label) for label in raw}
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config fields {sorted(unknown)}")
        for key in ("models", "schemes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(dgp=dgp, learners=learners, **d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def workers_from_env(cfg: ExperimentConfig) -> ExperimentConfig:
    """Apply the ``DMLLAB_WORKERS`` override when set."""
    raw = os.environ.get("DMLLAB_WORKERS")
    if not raw:
        return cfg
    try:
        return replace(cfg, workers=int(raw))
    except ValueError:
        raise InvalidArgumentError(f"DMLLAB_WORKERS must be an integer, got {raw!r}") from None


def cell_stream(master_seed: int, rep: int, dgp: str, model: str, learner: str,
                scheme: str) -> RngStream:
    return RngStream(master_seed).derive("cell", rep, dgp, model, learner, scheme)


def data_stream(master_seed: int, rep: int, dgp: str) -> RngStream:
    return RngStream(master_seed).derive("data", rep, dgp)


def _learner_order(labels: Iterable[str]) -> list[str]:
    return sorted(labels, key=lambda s: (LEARNER_ORDER.index(s) if s in LEARNER_ORDER
                                         else len(LEARNER_ORDER), s))


# =============================================================================
# ONE REPETITION
# =============================================================================

def _row(rep: int, dgp: str, model: str, learner: str, scheme: str, theta0: float,
         oracle_theta: float, est: CausalEstimate | None = None, q=None,
         error: str = "") -> dict:
    nan = math.nan
    return {"rep_id": rep, "dgp": dgp, "model": model, "learner": learner, "scheme": scheme,
            "theta_hat": est.theta_hat if est else nan, "std_error": est.std_error if est else nan,
            "ci_low": est.ci_low if est else nan, "ci_high": est.ci_high if est else nan,
            "theta0": theta0, "oracle_theta_hat": oracle_theta,
            "rmse_m": q.rmse_m if q else nan, "rmse_ell": q.rmse_ell if q else nan,
            "rmse_g": q.rmse_g if q else nan, "combined_loss": q.combined_loss if q else nan,
            "predictive_loss_y": q.predictive_loss_y if q else nan, "error_code": error}


def _oracle_quality(gen: GeneratedData, model: ModelKind, est: CausalEstimate, clip: float):
    t = gen.truth
    fold_of = np.zeros(gen.data.n, dtype=np.int64)
    if model is ModelKind.PLR:
        nuis = NuisancePredictions(model, t.m0, fold_of, ell_hat=t.ell0)
    else:
        nuis = NuisancePredictions(model, np.clip(t.m0, clip, 1.0 - clip), fold_of,
                                   g0_hat=t.g0_0, g1_hat=t.g0_1)
    return nuisance_quality(gen.data, nuis, est.theta_hat)


def run_repetition(cfg: ExperimentConfig, rep: int,
                   gen: GeneratedData | None = None) -> tuple[list[dict], list[dict]]:
    """Rows and tuning audits for one repetition; cell failures become error rows."""
    dgp = cfg.dgp_label
    gen = gen if gen is not None else generate(cfg.dgp, data_stream(cfg.master_seed, rep, dgp))
    theta0 = gen.truth.theta0
    rows, audits = [], []
    for model in cfg.models:
        mk = ModelKind(model)
        try:
            oracle = oracle_estimate(gen, mk, cfg.clip, cfg.level)
            oracle_theta = oracle.theta_hat
            rows.append(_row(rep, dgp, model, ORACLE, ORACLE, theta0, oracle_theta, oracle,
                             _oracle_quality(gen, mk, oracle, cfg.clip)))
        except (DmlLabError, ArithmeticError, ValueError) as exc:
            oracle_theta = math.nan
            rows.append(_row(rep, dgp, model, ORACLE, ORACLE, theta0, math.nan,
                             error=type(exc).__name__))
        for learner in _learner_order(cfg.learners):
            for scheme in cfg.schemes:
                rng = cell_stream(cfg.master_seed, rep, dgp, model, learner, scheme)
                try:
                    res = run_dml(gen.data, mk, cfg.learners[learner], scheme, cfg.k_folds, rng,
                                  cfg.clip, cfg.level, cfg.aggregation, cfg.irm_g_fit)
                except (DmlLabError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                    log.warning("rep %d %s/%s/%s failed: %s", rep, model, learner, scheme, exc)
                    rows.append(_row(rep, dgp, model, learner, scheme, theta0, oracle_theta,
                                     error=type(exc).__name__))
                    continue
                rows.append(_row(rep, dgp, model, learner, scheme, theta0, oracle_theta,
                                 res.estimate, res.quality))
                audits.append({"rep_id": rep, "model": model, "learner": learner,
                               "scheme": scheme, **res.outcome.audit_record()})
    return rows, audits


# =============================================================================
# PARALLEL EXECUTION
# =============================================================================

def _init_worker() -> None:
    threadpool_limits(1)


def _rep_task(args: tuple[ExperimentConfig, int]) -> tuple[list[dict], list[dict]]:
    cfg, rep = args
    with threadpool_limits(1):
        return run_repetition(cfg, rep)


def _warm(spec: DgpSpec) -> None:
    # calibrate once in the parent so forked workers inherit the cache
    if spec.kind == "acic":
        calibrate(int(spec.template_id), int(spec.coeff_seed))


def map_reps(fn: Callable, tasks: Sequence, workers: int) -> list:
    """Ordered map over repetition tasks, in-process for one worker."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks)),
                             initializer=_init_worker) as pool:
        return list(pool.map(fn, tasks))


def run_rows(cfg: ExperimentConfig) -> tuple[list[dict], list[dict]]:
    _warm(cfg.dgp)
    out = map_reps(_rep_task, [(cfg, r) for r in range(cfg.reps)], cfg.workers)
    rows = [row for r, _ in out for row in r]
    audits = [entry for _, rep_audits in out for entry in rep_audits]
    return rows, audits


# =============================================================================
# PERSISTENCE
# =============================================================================

def _fmt(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(rows: Sequence[Mapping], columns: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_results(path: str | Path) -> list[dict]:
    ints = {"rep_id"}
    text = {"dgp", "model", "learner", "scheme", "error_code"}
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({k: (int(v) if k in ints else v if k in text else float(v))
                        for k, v in row.items()})
    return out


def _estimate(row: Mapping, theta_key: str = "theta_hat") -> CausalEstimate:
    return CausalEstimate(row[theta_key], row.get("std_error", math.nan),
                          row.get("ci_low", math.nan), row.get("ci_high", math.nan),
                          ModelKind(row["model"]), 0, None)  # type: ignore[arg-type]


def to_repetition_results(rows: Iterable[Mapping]) -> list[RepetitionResult]:
    """Successful rows as :class:`RepetitionResult` (the oracle keeps only its point estimate)."""
    from .dml import NuisanceQuality
    out = []
    for row in rows:
        if row["error_code"] or not math.isfinite(row["theta_hat"]):
            continue
        q = NuisanceQuality(row["rmse_m"], row["rmse_ell"], row["rmse_g"], row["combined_loss"],
                            row["predictive_loss_y"])
        oracle = CausalEstimate(row["oracle_theta_hat"], math.nan, math.nan, math.nan,
                                ModelKind(row["model"]), 0, None)  # type: ignore[arg-type]
        out.append(RepetitionResult(int(row["rep_id"]), row["dgp"], ModelKind(row["model"]),
                                    row["learner"], row["scheme"], _estimate(row), q,
                                    row["theta0"], oracle))
    return out


def model_selection_results(results: Sequence[RepetitionResult]) -> list[RepetitionResult]:
    """Per repetition, the PLR or IRM row picked by outcome loss.

    The picked row keeps its model kind; its learner label gains a
    ``+model_selected`` suffix.
    """
    by: dict[tuple, dict[str, RepetitionResult]] = {}
    for r in results:
        if r.learner == ORACLE:
            continue
        by.setdefault((r.dgp, r.learner, r.scheme, r.rep_id), {})[ModelKind(r.model_kind).value] = r
    out = []
    for key in sorted(by):
        pair = by[key]
        if set(pair) != {"plr", "irm"}:
            continue
        pick = select_causal_model(pair["plr"].quality, pair["irm"].quality)
        chosen = pair[pick.value]
        out.append(replace(chosen, learner=f"{chosen.learner}+model_selected"))
    return out


def aggregate_rows(rows: Sequence[Mapping], selection_scope: str = "per_repetition"
                   ) -> list[MetricsRecord]:
    """Metrics per cell group plus learner-selection pseudo-learners."""
    results = to_repetition_results(rows)
    learners = {r.learner for r in results if r.learner != ORACLE}
    extra: list[RepetitionResult] = []
    if len(learners) >= 2:
        pool = [r for r in results if r.learner != ORACLE]
        for crit in ("combined_loss", "predictive_loss_y"):
            extra += selected_results(pool, crit, selection_scope)
    extra += model_selection_results(results)
    return aggregate_all(list(results) + extra)


def _versions() -> dict:
    import numba
    import scipy

    from . import __version__
    return {"dmllab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__}


@dataclass(frozen=True)
class RunSummary:
    cells: int
    failed: int
    results_path: Path
    aggregate_path: Path
    manifest_path: Path

    @property
    def ok(self) -> bool:
        return self.cells == 0 or self.failed / self.cells <= FAILURE_SHARE


def _file_logger(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> RunSummary:
    """Run every repetition and write results, aggregate and manifest files.

    Timestamps go only to ``run.log``; the other files are byte-identical
    for identical configurations regardless of the worker count.
    """
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = _file_logger(out)
    try:
        t0 = time.time()
        log.info("run start: %s reps, %s workers", cfg.reps, cfg.workers)
        rows, audits = run_rows(cfg)
        results_path = out / "results.csv"
        write_rows(rows, RESULT_COLUMNS, results_path)
        aggregate_path = out / "aggregate.csv"
        write_aggregate_csv(aggregate_rows(rows), aggregate_path)
        cells = [r for r in rows if r["learner"] != ORACLE]
        failed = sum(1 for r in cells if r["error_code"])
        manifest = {"config": {**cfg.to_dict(), "workers": None, "output_dir": None},
                    "versions": _versions(), "cells": len(cells), "failed_cells": failed,
                    "tuning_audit": audits}
        manifest_path = out / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=float))
        log.info("run done in %.1fs: %d cells, %d failed", time.time() - t0, len(cells), failed)
        return RunSummary(len(cells), failed, results_path, aggregate_path, manifest_path)
    finally:
        log.removeHandler(handler)
        handler.close()


# =============================================================================
# LAMBDA SURFACE
# =============================================================================

SURFACE_COLUMNS = ("lambda_ell", "lambda_m", "mse", "mean_bias", "coverage",
                   "mean_combined_loss", "reps", "failed")


def default_lambda_grid(cfg: ExperimentConfig, size: int = 5) -> tuple[list[float], list[float]]:
    """``lambda_max * logspace(-2, 0, size)`` per nuisance, from a pilot dataset."""
    pilot = generate(cfg.dgp, RngStream(cfg.master_seed).derive("pilot"))
    xs = standardize(pilot.data.x)[0]
    ladder = np.logspace(-2.0, 0.0, size)
    return ([float(v) for v in lambda_max(xs, pilot.data.y) * ladder],
            [float(v) for v in lambda_max(xs, pilot.data.d) * ladder])


def _surface_task(args) -> list[dict]:
    cfg, rep, grid_ell, grid_m = args
    with threadpool_limits(1):
        gen = generate(cfg.dgp, data_stream(cfg.master_seed, rep, cfg.dgp_label))
        out = []
        for i, le in enumerate(grid_ell):
            for j, lm in enumerate(grid_m):
                configs = {"ell": LearnerConfig("lasso", {"lambda": le}, Task.REGRESSION),
                           "m": LearnerConfig("lasso", {"lambda": lm}, Task.REGRESSION)}
                outcome = fixed_outcome(configs, ModelKind.PLR, cfg.k_folds)
                rng = cell_stream(cfg.master_seed, rep, cfg.dgp_label, "plr", f"lasso[{i},{j}]",
                                  "fixed")
                try:
                    res = run_dml(gen.data, ModelKind.PLR, None, Scheme.FULL_SAMPLE, cfg.k_folds,
                                  rng, cfg.clip, cfg.level, cfg.aggregation, outcome=outcome)
                except (DmlLabError, ArithmeticError, ValueError) as exc:
                    out.append({"i": i, "j": j, "error": type(exc).__name__})
                    continue
                est = res.estimate
                out.append({"i": i, "j": j, "error": "", "err": est.theta_hat - gen.truth.theta0,
                            "cover": est.ci_low <= gen.truth.theta0 <= est.ci_high,
                            "loss": res.quality.combined_loss})
        return out


def run_lambda_surface(cfg: ExperimentConfig, lambda_grid_ell: Sequence[float] | None = None,
                       lambda_grid_m: Sequence[float] | None = None,
                       output_path: str | Path | None = None) -> list[dict]:
    """MSE, coverage and combined loss of PLR lasso fits over a fixed penalty grid.

    Every grid cell reuses the same datasets, so cells are paired.
    """
    if cfg.dgp.kind != "bch":
        raise InvalidArgumentError("the lambda surface study runs on the bch design")
    if lambda_grid_ell is None or lambda_grid_m is None:
        dl, dm = default_lambda_grid(cfg)
        lambda_grid_ell = dl if lambda_grid_ell is None else lambda_grid_ell
        lambda_grid_m = dm if lambda_grid_m is None else lambda_grid_m
    ge, gm = [float(v) for v in lambda_grid_ell], [float(v) for v in lambda_grid_m]
    if not ge or not gm:
        raise InvalidArgumentError("lambda grids must be non-empty")
    per_rep = map_reps(_surface_task, [(cfg, r, ge, gm) for r in range(cfg.reps)], cfg.workers)
    rows = []
    for i, le in enumerate(ge):
        for j, lm in enumerate(gm):
            cells = [c for rep in per_rep for c in rep if c["i"] == i and c["j"] == j]
            ok = [c for c in cells if not c["error"]]
            err = np.array([c["err"] for c in ok])
            rows.append({"lambda_ell": le, "lambda_m": lm,
                         "mse": float(np.mean(err ** 2)) if ok else math.nan,
                         "mean_bias": float(np.mean(err)) if ok else math.nan,
                         "coverage": float(np.mean([c["cover"] for c in ok])) if ok else math.nan,
                         "mean_combined_loss": float(np.mean([c["loss"] for c in ok]))
                         if ok else math.nan,
                         "reps": len(ok), "failed": len(cells) - len(ok)})
    if output_path is not None:
        write_rows(rows, SURFACE_COLUMNS, output_path)
    return rows


# =============================================================================
# SCALING STUDY
# =============================================================================

SCALING_COLUMNS = ("n", "model", "learner", "scheme", "rmse", "mean_bias", "coverage", "reps",
                   "failed")


def run_scaling_study(cfg: ExperimentConfig, n_values: Sequence[int],
                      output_path: str | Path | None = None) -> list[dict]:
    """RMSE of theta_hat per (n, model, learner, scheme) with p held fixed."""
    if cfg.dgp.kind != "bch":
        raise InvalidArgumentError("the scaling study runs on the bch design")
    if not n_values:
        raise InvalidArgumentError("need at least one sample size")
    rows = []
    for n in n_values:
        sub = replace(cfg, dgp=replace(cfg.dgp, n=int(n)))
        cells, _ = run_rows(sub)
        groups: dict[tuple, list[dict]] = {}
        for r in cells:
            if r["learner"] == ORACLE:
                continue
            groups.setdefault((r["model"], r["learner"], r["scheme"]), []).append(r)
        for (model, learner, scheme), members in groups.items():
            ok = [r for r in members if not r["error_code"]]
            err = np.array([r["theta_hat"] - r["theta0"] for r in ok])
            rows.append({"n": int(n), "model": model, "learner": learner, "scheme": scheme,
                         "rmse": float(np.sqrt(np.mean(err ** 2))) if ok else math.nan,
                         "mean_bias": float(np.mean(err)) if ok else math.nan,
                         "coverage": float(np.mean([r["ci_low"] <= r["theta0"] <= r["ci_high"]
                                                    for r in ok])) if ok else math.nan,
                         "reps": len(ok), "failed": len(members) - len(ok)})
    if output_path is not None:
        write_rows(rows, SCALING_COLUMNS, output_path)
    return rows
