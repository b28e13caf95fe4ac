from typing import Any, Dict, List, Optional
import logging

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mcp.server.fastmcp import FastMCP

from common.utils import plm_mcp_tool
from plm_tools import tools

# Configure logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logging.getLogger('sklearn').setLevel(logging.WARNING)
logging.getLogger('joblib').setLevel(logging.WARNING)
logger = logging.getLogger(__name__)

logger.info("Initializing PLM Inference Server")
mcp = FastMCP("PLM Inference Server")


@plm_mcp_tool(mcp)
def fit_hd(file_path: str, y: str, a: str, x: Optional[List[str]] = None, seed: int = 0,
           link: str = "identity", cv_folds: int = 5, bootstrap_draws: int = 500,
           expand_basis: bool = False,
           downsample_prevalence: Optional[float] = None) -> Dict[str, Any]:
    """Estimate the exposure log odds ratio with the high-dimensional estimator.

    Args:
        file_path: CSV file with a header row
        y: Binary response column
        a: Exposure column
        x: Covariate columns (default: all remaining columns)
        seed: Seed for cross-validation folds and bootstrap draws
        link: "identity" or "expit" link of the exposure model among controls
        cv_folds: Folds for lambda selection
        bootstrap_draws: Multiplier bootstrap draws (0 for the normal interval)
        expand_basis: Add pairwise products and spline columns
        downsample_prevalence: Target case prevalence after dropping controls

    Returns:
        Dict with status and the result record (estimate, SE, CI, p-value, lambdas, KKT residuals)
    """
    logger.info(f"fit_hd on {file_path}")
    return tools.fit_hd_csv(file_path, y, a, x, seed, link, cv_folds, bootstrap_draws,
                            expand_basis, downsample_prevalence)


@plm_mcp_tool(mcp)
def fit_dml(file_path: str, y: str, a: str, x: Optional[List[str]] = None,
            learner: str = "boosted-trees", k_outer: int = 5, k_inner: int = 5,
            r_variant: str = "difference", seed: int = 0, bootstrap_draws: int = 500,
            expand_basis: bool = False, downsample_prevalence: Optional[float] = None,
            n_jobs: int = 1) -> Dict[str, Any]:
    """Estimate the exposure log odds ratio with cross-fitted machine-learning nuisances.

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
    logger.info(f"fit_dml on {file_path} with {learner}")
    return tools.fit_dml_csv(file_path, y, a, x, learner, k_outer, k_inner, r_variant, seed,
                             bootstrap_draws, expand_basis, downsample_prevalence, n_jobs)


@plm_mcp_tool(mcp)
def simulate(config: str, n: int, p: Optional[int] = None, reps: int = 10,
             estimator: str = "hd", learner: str = "boosted-trees", seed: int = 0,
             bootstrap_draws: int = 500, n_jobs: int = 1, oracle: bool = False) -> Dict[str, Any]:
    """Run a Monte Carlo study of an estimator on a simulation design.

    Args:
        config: hd-i, hd-ii, hd-iii or ml
        n: Sample size per replicate
        p: Covariate dimension (default 200 for hd designs, 20 for ml)
        reps: Number of replicates
        estimator: "hd" or "dml"
        learner: Learner kind for the dml estimator
        seed: Root seed
        bootstrap_draws: Multiplier bootstrap draws per replicate
        n_jobs: Parallel workers over replicates
        oracle: Use the true nuisances (dml only)

    Returns:
        Dict with status, MSE / bias / coverage summary and per-replicate records
    """
    logger.info(f"simulate {config} n={n} reps={reps} estimator={estimator}")
    return tools.simulate(config, n, p, reps, estimator, learner, seed, bootstrap_draws,
                          n_jobs, oracle)


@plm_mcp_tool(mcp)
def generate_dataset(config: str, n: int, p: Optional[int] = None, seed: int = 0,
                     output_path: str = "simulated.csv") -> Dict[str, Any]:
    """Draw one dataset from a simulation design and save it as CSV.

    Args:
        config: hd-i, hd-ii, hd-iii or ml
        n: Number of rows
        p: Covariate dimension
        seed: Seed of the draw
        output_path: Destination CSV path

    Returns:
        Dict with status, file path, true beta and case prevalence
    """
    return tools.generate_dataset(config, n, p, seed, output_path)


if __name__ == "__main__":
    mcp.run(transport="stdio")
