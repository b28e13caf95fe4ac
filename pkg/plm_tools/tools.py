"""
PLM Tools facade.

Status-dictionary entry points around the library: every function returns
{"status": "success", ...} or a ToolError and never raises.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import logging

import numpy as np

from common.utils import ToolError

from .data import (
    MIN_SPLINE_LEVELS,
    ColumnSchema,
    Dataset,
    basis_column_names,
    basis_expand,
    derive_seed,
    downsample_controls,
    read_delimited,
    write_delimited,
)
from .dml import DmlConfig, fit_dml
from .exceptions import EstimationError
from .hd import HdConfig, fit_hd
from .learners import KINDS, LearnerSpec
from .records import dml_record, hd_record, sim_records
from .simgen import DmlEstimator, GeneratorSpec, HdEstimator, generate, run_replicates

logger = logging.getLogger(__name__)

LEARNER_CHOICES = KINDS + ("best",)


def continuous_mask(x: np.ndarray) -> np.ndarray:
    """Columns with enough distinct values for a spline basis are treated as continuous."""
    return np.array([np.unique(x[:, j]).shape[0] >= MIN_SPLINE_LEVELS for j in range(x.shape[1])])


def prepare_dataset(file_path: Union[str, Path], y: str, a: str,
                    x: Optional[List[str]] = None, expand_basis: bool = False,
                    downsample_prevalence: Optional[float] = None, seed: int = 0) -> Dataset:
    """Read, optionally downsample controls, then optionally basis-expand."""
    d = read_delimited(file_path, ColumnSchema(y=y, a=a, x=tuple(x) if x else None))
    if downsample_prevalence is not None:
        d = downsample_controls(d, downsample_prevalence, derive_seed(seed, 7))
    if expand_basis:
        mask = continuous_mask(d.x)
        d = Dataset(d.y, d.a, basis_expand(d.x, mask),
                    x_names=basis_column_names(d.x_names, mask), row_ids=d.row_ids)
        logger.info(f"Basis expansion: {int(mask.sum())} continuous columns, {d.p} features")
    return d


def dml_config_for(learner: str = "boosted-trees", **kwargs: Any) -> DmlConfig:
    """DmlConfig for one learner kind, or "best" for per-component selection among all kinds."""
    if learner == "best":
        return DmlConfig(candidates=tuple(LearnerSpec(kind) for kind in KINDS), **kwargs)
    if learner not in KINDS:
        raise ValueError(f"learner must be one of {LEARNER_CHOICES}, got {learner!r}")
    return DmlConfig.for_learner(learner, **kwargs)


def fit_hd_csv(file_path: str, y: str, a: str, x: Optional[List[str]] = None, seed: int = 0,
               link: str = "identity", cv_folds: int = 5, bootstrap_draws: int = 500,
               expand_basis: bool = False,
               downsample_prevalence: Optional[float] = None) -> Union[Dict[str, Any], ToolError]:
    """Fit the high-dimensional estimator to a CSV file.

    Args:
        file_path: CSV file with a header row
        y: Binary response column
        a: Exposure column
        x: Covariate columns (default: all remaining columns)
        seed: Seed for cross-validation folds and bootstrap draws
        link: Link of the exposure model among controls, "identity" or "expit"
        cv_folds: Folds for lambda selection
        bootstrap_draws: Multiplier bootstrap draws (0 for the normal interval)
        expand_basis: Add pairwise products and spline columns
        downsample_prevalence: Target case prevalence after dropping controls

    Returns:
        Dict with status and the result record
    """
    try:
        d = prepare_dataset(file_path, y, a, x, expand_basis, downsample_prevalence, seed)
        cfg = HdConfig(link=link, cv_folds=cv_folds, bootstrap_draws=bootstrap_draws, seed=seed)
        record = hd_record(fit_hd(d, cfg), {"seed": seed, "input": str(file_path)})
        return {"status": "success", "message": f"beta_hat = {record['beta_hat']:.6g}",
                "record": record}
    except (EstimationError, ValueError, OSError) as e:
        return ToolError.from_exception(e, "fit-hd")


def fit_dml_csv(file_path: str, y: str, a: str, x: Optional[List[str]] = None,
                learner: str = "boosted-trees", k_outer: int = 5, k_inner: int = 5,
                r_variant: str = "difference", seed: int = 0, bootstrap_draws: int = 500,
                expand_basis: bool = False, downsample_prevalence: Optional[float] = None,
                n_jobs: int = 1) -> Union[Dict[str, Any], ToolError]:
    """Fit the cross-fitted estimator to a CSV file.

    Args:
        file_path: CSV file with a header row
        y: Binary response column
        a: Exposure column
        x: Covariate columns (default: all remaining columns)
        learner: boosted-trees, random-forest, penalized-linear, k-nearest or best
        k_outer: Outer cross-fitting folds
        k_inner: Inner folds of the refitting step
        r_variant: "difference" or "ratio"
        seed: Seed for every split, learner and bootstrap draw
        bootstrap_draws: Multiplier bootstrap draws (0 for the normal interval)
        expand_basis: Add pairwise products and spline columns
        downsample_prevalence: Target case prevalence after dropping controls
        n_jobs: Parallel workers over outer folds

    Returns:
        Dict with status and the result record
    """
    try:
        d = prepare_dataset(file_path, y, a, x, expand_basis, downsample_prevalence, seed)
        cfg = dml_config_for(learner, k_outer=k_outer, k_inner=k_inner, r_variant=r_variant,
                             seed=seed, bootstrap_draws=bootstrap_draws, n_jobs=n_jobs)
        record = dml_record(fit_dml(d, cfg), {"seed": seed, "input": str(file_path),
                                              "learner": learner})
        return {"status": "success", "message": f"beta_hat = {record['beta_hat']:.6g}",
                "record": record}
    except (EstimationError, ValueError, OSError) as e:
        return ToolError.from_exception(e, "fit-dml")


def simulate(config: str, n: int, p: Optional[int] = None, reps: int = 10,
             estimator: str = "hd", learner: str = "boosted-trees", seed: int = 0,
             bootstrap_draws: int = 500, n_jobs: int = 1,
             oracle: bool = False) -> Union[Dict[str, Any], ToolError]:
    """Run a Monte Carlo study and report MSE, bias and coverage.

    Args:
        config: hd-i, hd-ii, hd-iii or ml
        n: Sample size per replicate
        p: Covariate dimension (default 200 for hd designs, 20 for ml)
        reps: Number of replicates
        estimator: "hd" or "dml"
        learner: Learner kind for the dml estimator
        seed: Root seed; replicate r uses a stream derived from (seed, r)
        bootstrap_draws: Multiplier bootstrap draws per replicate
        n_jobs: Parallel workers over replicates
        oracle: Use the true nuisances instead of learning them (dml only)

    Returns:
        Dict with status, the summary record and the per-replicate records
    """
    try:
        spec = GeneratorSpec(config, n, p, seed)
        if oracle and estimator != "dml":
            raise ValueError("oracle nuisances are only used by the dml estimator")
        if estimator == "hd":
            est = HdEstimator(HdConfig(bootstrap_draws=bootstrap_draws))
        elif estimator == "dml":
            est = DmlEstimator(dml_config_for(learner, bootstrap_draws=bootstrap_draws),
                               use_oracle=oracle)
        else:
            raise ValueError(f"estimator must be 'hd' or 'dml', got {estimator!r}")
        report = run_replicates(spec, est, reps, n_jobs=n_jobs)
        records = sim_records(report, {"seed": seed})
        return {"status": "success",
                "message": f"mse={report.mse:.4g}, bias={report.bias:.4g}, cp={report.cp:.3f}",
                "summary": records[0], "replicates": records[1:]}
    except (EstimationError, ValueError, OSError) as e:
        return ToolError.from_exception(e, "simulate")


def generate_dataset(config: str, n: int, p: Optional[int] = None, seed: int = 0,
                     output_path: str = "simulated.csv") -> Union[Dict[str, Any], ToolError]:
    """Draw one dataset from a simulation design and save it as CSV (columns y, a, x1..xp).

    Returns:
        Dict with status, file path, true beta and prevalence
    """
    try:
        sim = generate(GeneratorSpec(config, n, p, seed))
        write_delimited(sim.dataset, output_path)
        return {"status": "success", "message": f"Wrote {n} rows to {output_path}",
                "file_path": str(output_path), "true_beta": sim.true_beta,
                "prevalence": sim.dataset.prevalence}
    except (EstimationError, ValueError, OSError) as e:
        return ToolError.from_exception(e, "generate")
