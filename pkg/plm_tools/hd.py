"""
High-dimensional estimator of beta.

Stages, in order:
    1. initial-gamma     L1 logistic regression of Y on (A, X); A unpenalized.
    2. alpha             weighted link-integral LASSO of A on X among controls.
    3. beta-preliminary  root of the preliminary estimating equation.
    4. gamma-calibrated  weighted calibration regression with offset beta * A.
    5. beta-final        root of the final equation, plug-in inference.

Every penalized stage is certified by its KKT residual; the subgradient
condition at level lambda is the Dantzig-type moment constraint. The two
weighted stages rescale their weights to mean one before lambda is chosen,
so the raw-weight constraint holds at lambda times the stage weight scale.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import logging

import numpy as np
from scipy.special import expit

from .data import Dataset, FoldAssignment, derive_seed, make_folds
from .exceptions import DataValidationError, EstimationError, RootFindingError, SolverError
from .optim import (
    PenalizedProblem,
    Solution,
    cv_select_lambda,
    default_lambda_grid,
    solve_penalized,
)
from .score import InferenceResult, NuisanceValues, plug_in_inference, solve_beta, score_vector

logger = logging.getLogger(__name__)

STAGES = ("initial-gamma", "alpha", "beta-preliminary", "gamma-calibrated", "beta-final")


@dataclass(frozen=True)
class HdConfig:
    lambda_grid_scale: Tuple[float, float] = (0.2, 2.0)
    cv_folds: int = 5
    link: str = "identity"
    seed: int = 0
    grid_size: int = 20
    bootstrap_draws: int = 500
    level: float = 0.95
    tol: float = 1e-7
    max_iter: int = 10000
    beta_tol: float = 1e-8
    lambda_initial: Optional[float] = None
    lambda_alpha: Optional[float] = None
    lambda_gamma: Optional[float] = None
    guard_fraction: float = 0.01
    normalize_weights: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        low, high = self.lambda_grid_scale
        object.__setattr__(self, "lambda_grid_scale", (float(low), float(high)))
        if not 0 < low < high:
            raise ValueError(f"lambda_grid_scale must be positive and ordered, got {self.lambda_grid_scale}")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")
        if self.link not in ("identity", "expit"):
            raise ValueError(f"link must be 'identity' or 'expit', got {self.link!r}")
        if self.bootstrap_draws != 0 and self.bootstrap_draws < 100:
            raise ValueError("bootstrap_draws must be 0 or at least 100")
        for name in ("lambda_initial", "lambda_alpha", "lambda_gamma"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be nonnegative")


def link_g(u: np.ndarray, link: str) -> np.ndarray:
    return u if link == "identity" else expit(u)


def link_g_prime(u: np.ndarray, link: str) -> np.ndarray:
    if link == "identity":
        return np.ones_like(u)
    p = expit(u)
    return p * (1.0 - p)


@dataclass(frozen=True, eq=False)
class StageFit:
    """Coefficients of one penalized stage with its lambda and solver certificate."""
    name: str
    coef: np.ndarray
    lam: float
    solution: Solution
    beta_init: Optional[float] = None
    weight_scale: float = 1.0

    @property
    def kkt_residual(self) -> float:
        return self.solution.kkt_residual

    @property
    def gradient_sup(self) -> float:
        return self.solution.gradient_sup

    @property
    def dantzig_bound(self) -> float:
        """Bound on the l-infinity moment constraint with the raw (unnormalized) weights."""
        return self.lam * self.weight_scale


@dataclass(frozen=True, eq=False)
class HdFit:
    gamma_tilde: np.ndarray
    alpha_hat: np.ndarray
    gamma_hat: np.ndarray
    beta_init: float
    beta_tilde: float
    beta_hat: float
    inference: InferenceResult
    stages: Dict[str, StageFit]
    fold_seed: int
    equation_residual: float
    link: str
    x_names: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def lambdas(self) -> Dict[str, float]:
        return {name: stage.lam for name, stage in self.stages.items()}

    @property
    def kkt_residuals(self) -> Dict[str, float]:
        return {name: stage.kkt_residual for name, stage in self.stages.items()}


def _prepare(d: Dataset) -> Dataset:
    d = d.with_intercept()
    if d.n_cases == 0 or d.n_cases == d.n:
        raise DataValidationError("response must contain both classes", stage="dataset")
    return d


def _penalty_mask(p: int) -> np.ndarray:
    mask = np.ones(p, dtype=bool)
    mask[0] = False
    return mask


def _choose_lambda(prob: PenalizedProblem, fixed: Optional[float], cfg: HdConfig,
                   n_covariates: int, folds: FoldAssignment,
                   init: Optional[np.ndarray] = None) -> float:
    if fixed is not None:
        return float(fixed)
    grid = default_lambda_grid(prob.n, n_covariates, cfg.lambda_grid_scale, cfg.grid_size)
    return cv_select_lambda(prob, grid, folds, tol=cfg.tol, max_iter=cfg.max_iter,
                            init=init, n_jobs=cfg.n_jobs)


def _solve(prob: PenalizedProblem, cfg: HdConfig, init: Optional[np.ndarray] = None) -> Solution:
    sol = solve_penalized(prob, tol=cfg.tol, max_iter=cfg.max_iter, init=init)
    if not sol.converged:
        raise SolverError(f"solver did not converge in {sol.iterations} sweeps "
                          f"(KKT residual {sol.kkt_residual:.3g})",
                          info={"iterations": sol.iterations, "kkt_residual": sol.kkt_residual})
    return sol


def _normalized(weights: np.ndarray, cfg: HdConfig) -> Tuple[np.ndarray, float]:
    """Weights rescaled to mean one (the glmnet convention) and the scale divided out."""
    scale = float(np.mean(weights)) if cfg.normalize_weights else 1.0
    return weights / scale, scale


def _folds_for(d: Dataset, cfg: HdConfig, folds: Optional[FoldAssignment]) -> FoldAssignment:
    return folds if folds is not None else make_folds(d.n, cfg.cv_folds, derive_seed(cfg.seed, 0))


def fit_initial_gamma(d: Dataset, cfg: HdConfig = HdConfig(),
                      folds: Optional[FoldAssignment] = None) -> StageFit:
    """L1 logistic regression of Y on (A, X).

    ``coef`` is the X part (intercept first) and ``beta_init`` the A coefficient.
    """
    d = _prepare(d)
    folds = _folds_for(d, cfg, folds)
    design = np.column_stack([d.a, d.x])
    mask = np.ones(design.shape[1], dtype=bool)
    mask[:2] = False
    prob = PenalizedProblem("logistic", design, d.y, penalty_mask=mask)
    lam = _choose_lambda(prob, cfg.lambda_initial, cfg, d.p - 1, folds)
    sol = _solve(prob.with_lambda(lam), cfg)
    logger.info(f"initial gamma: lambda={lam:.5g}, "
                f"{int(np.count_nonzero(sol.coef[2:]))} nonzero covariates")
    return StageFit("initial-gamma", sol.coef[1:].copy(), lam, sol, beta_init=float(sol.coef[0]))


def fit_alpha(d: Dataset, gamma_tilde: np.ndarray, cfg: HdConfig = HdConfig(),
              folds: Optional[FoldAssignment] = None) -> StageFit:
    """Weighted link-integral LASSO of A on X with weights (1 - Y) psi(X) exp(X gamma_tilde)."""
    d = _prepare(d)
    folds = _folds_for(d, cfg, folds)
    weights = (1.0 - d.y) * expit(d.x @ gamma_tilde)
    if not np.any(weights > 0):
        raise DataValidationError("all alpha weights are zero: no controls", stage="alpha")
    weights, scale = _normalized(weights, cfg)
    prob = PenalizedProblem("weighted-link-integral", d.x, d.a, weights=weights,
                            penalty_mask=_penalty_mask(d.p), link=cfg.link)
    lam = _choose_lambda(prob, cfg.lambda_alpha, cfg, d.p - 1, folds)
    sol = _solve(prob.with_lambda(lam), cfg)
    logger.info(f"alpha: lambda={lam:.5g}, {int(np.count_nonzero(sol.coef[1:]))} nonzero covariates")
    return StageFit("alpha", sol.coef.copy(), lam, sol, weight_scale=scale)


def _preliminary_values(d: Dataset, gamma_tilde: np.ndarray, alpha_hat: np.ndarray,
                        link: str) -> NuisanceValues:
    xg = d.x @ gamma_tilde
    return NuisanceValues(r=xg, m=link_g(d.x @ alpha_hat, link), psi=expit(-xg))


def _solve_with_retry(d: Dataset, values: NuisanceValues, init: float, tol: float,
                      row_weight: Optional[np.ndarray] = None) -> float:
    try:
        return solve_beta(d, values, init=init, tol=tol, row_weight=row_weight)
    except RootFindingError:
        if init == 0.0:
            raise
        logger.warning(f"no sign change around {init:.4g}; retrying with bracket centered at 0")
        return solve_beta(d, values, init=0.0, tol=tol, row_weight=row_weight)


def fit_beta_preliminary(d: Dataset, gamma_tilde: np.ndarray, alpha_hat: np.ndarray,
                         cfg: HdConfig = HdConfig(), init: float = 0.0) -> float:
    d = _prepare(d)
    values = _preliminary_values(d, gamma_tilde, alpha_hat, cfg.link)
    beta = _solve_with_retry(d, values, init, cfg.beta_tol)
    logger.info(f"preliminary beta={beta:.6g}")
    return beta


def fit_gamma_calibrated(d: Dataset, gamma_tilde: np.ndarray, alpha_hat: np.ndarray,
                         beta_tilde: float, cfg: HdConfig = HdConfig(),
                         folds: Optional[FoldAssignment] = None) -> StageFit:
    """Calibration regression of Y on X with offset beta_tilde * A, warm-started at gamma_tilde."""
    d = _prepare(d)
    folds = _folds_for(d, cfg, folds)
    weights = expit(d.x @ gamma_tilde) * link_g_prime(d.x @ alpha_hat, cfg.link)
    weights, scale = _normalized(weights, cfg)
    prob = PenalizedProblem("calibration-exponential", d.x, d.y, weights=weights,
                            offset=beta_tilde * d.a, penalty_mask=_penalty_mask(d.p))
    lam = _choose_lambda(prob, cfg.lambda_gamma, cfg, d.p - 1, folds, init=gamma_tilde)
    sol = _solve(prob.with_lambda(lam), cfg, init=gamma_tilde)
    if sol.guard_events > cfg.guard_fraction * d.n:
        raise SolverError(f"exponent guard saturated on {sol.guard_events} of {d.n} samples",
                          info={"guard_events": sol.guard_events})
    logger.info(f"calibrated gamma: lambda={lam:.5g}, "
                f"{int(np.count_nonzero(sol.coef[1:]))} nonzero covariates")
    return StageFit("gamma-calibrated", sol.coef.copy(), lam, sol, weight_scale=scale)


def _staged(name: str, func, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except EstimationError as e:
        raise e.with_stage(name) from e


def fit_hd(d: Dataset, cfg: HdConfig = HdConfig()) -> HdFit:
    """Run all stages and return the final estimate with inference."""
    d = _prepare(d)
    fold_seed = derive_seed(cfg.seed, 0)
    folds = make_folds(d.n, cfg.cv_folds, fold_seed)
    logger.info(f"HD fit: n={d.n}, p={d.p - 1}, link={cfg.link}")

    initial = _staged("initial-gamma", fit_initial_gamma, d, cfg, folds)
    gamma_tilde = initial.coef
    alpha = _staged("alpha", fit_alpha, d, gamma_tilde, cfg, folds)
    beta_tilde = _staged("beta-preliminary", fit_beta_preliminary, d, gamma_tilde, alpha.coef,
                         cfg, init=initial.beta_init)
    gamma = _staged("gamma-calibrated", fit_gamma_calibrated, d, gamma_tilde, alpha.coef,
                    beta_tilde, cfg, folds)

    values = NuisanceValues(r=d.x @ gamma.coef, m=link_g(d.x @ alpha.coef, cfg.link),
                            psi=expit(-(d.x @ gamma_tilde)))
    row_weight = np.exp(d.x @ (gamma_tilde - gamma.coef))
    beta_hat = _staged("beta-final", _solve_with_retry, d, values, beta_tilde, cfg.beta_tol,
                       row_weight)
    residual = float(np.mean(score_vector(d, beta_hat, values, row_weight=row_weight)))
    inference = _staged("beta-final", plug_in_inference, d, beta_hat, values,
                        extra_a_weight=row_weight, level=cfg.level,
                        bootstrap_draws=cfg.bootstrap_draws, seed=derive_seed(cfg.seed, 1))
    logger.info(f"HD estimate beta={beta_hat:.6g} (se {inference.se:.4g})")
    return HdFit(
        gamma_tilde=gamma_tilde,
        alpha_hat=alpha.coef,
        gamma_hat=gamma.coef,
        beta_init=float(initial.beta_init),
        beta_tilde=beta_tilde,
        beta_hat=beta_hat,
        inference=inference,
        stages={s.name: s for s in (initial, alpha, gamma)},
        fold_seed=fold_seed,
        equation_residual=residual,
        link=cfg.link,
        x_names=d.x_names,
    )
