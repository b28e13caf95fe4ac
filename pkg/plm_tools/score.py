"""
Orthogonal score for the logistic partially linear model.

    h(D; beta, eta) = psi(X) * {Y exp(-beta A) - (1 - Y) exp(r(X))} * {A - m(X)}

with eta = (r, m, psi). Includes cross-fitted evaluation, root solving for
beta, plug-in sandwich inference and the Gaussian multiplier bootstrap.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .data import Dataset, FoldAssignment, derive_seed
from .exceptions import DegenerateInferenceError, EstimationError
from .optim import EXPONENT_CAP, solve_scalar_root

logger = logging.getLogger(__name__)

Evaluator = Callable[[np.ndarray], np.ndarray]

I_BAR_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Evaluable nuisances r, m and psi; each maps a covariate matrix to a vector.

    ``psi`` defaults to ``expit(-r)``. ``provenance`` maps a component name to
    the original row ids the component was trained on.
    """
    r: Evaluator
    m: Evaluator
    psi: Optional[Evaluator] = None
    provenance: Mapping[str, np.ndarray] = field(default_factory=dict)

    def evaluate(self, x: np.ndarray) -> "NuisanceValues":
        r = np.asarray(self.r(x), dtype=float).reshape(-1)
        m = np.asarray(self.m(x), dtype=float).reshape(-1)
        psi = expit(-r) if self.psi is None else np.asarray(self.psi(x), dtype=float).reshape(-1)
        return NuisanceValues(r, m, psi)


@dataclass(frozen=True, eq=False)
class NuisanceValues:
    """Per-row evaluations of a NuisanceSet."""
    r: np.ndarray
    m: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        for name in ("r", "m", "psi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))


NuisanceInput = Union[NuisanceSet, NuisanceValues, Sequence[NuisanceSet]]


@dataclass(frozen=True)
class InferenceResult:
    beta_hat: float
    i_bar: float
    sigma_hat: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    bootstrap_draws: int
    normal_ci_low: float
    normal_ci_high: float
    level: float = 0.95
    n: int = 0
    degenerate: bool = False

    def as_dict(self) -> Dict[str, float]:
        return {
            "beta_hat": self.beta_hat,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p_value": self.p_value,
            "i_bar": self.i_bar,
            "sigma_hat": self.sigma_hat,
            "normal_ci_low": self.normal_ci_low,
            "normal_ci_high": self.normal_ci_high,
            "level": self.level,
            "bootstrap_draws": self.bootstrap_draws,
            "degenerate": self.degenerate,
        }


def score_h(y, a, beta: float, r, m, psi):
    """The orthogonal score, elementwise over arrays or scalars."""
    return psi * (y * np.exp(-beta * a) - (1.0 - y) * np.exp(r)) * (a - m)


def evaluate_nuisances(d: Dataset, eta: NuisanceInput,
                       folds: Optional[FoldAssignment] = None) -> NuisanceValues:
    """Evaluate nuisances on every row; with ``folds`` row i uses the set of its own fold."""
    if isinstance(eta, NuisanceValues):
        values = eta
    elif folds is None:
        if not isinstance(eta, NuisanceSet):
            raise ValueError("per-fold nuisance sets require a fold assignment")
        values = eta.evaluate(d.x)
    else:
        sets = [eta] * folds.k if isinstance(eta, NuisanceSet) else list(eta)
        if len(sets) != folds.k:
            raise ValueError(f"{len(sets)} nuisance sets for {folds.k} folds")
        r, m, psi = np.empty(d.n), np.empty(d.n), np.empty(d.n)
        for fold, _, test in folds.splits():
            part = sets[fold - 1].evaluate(d.x[test])
            r[test], m[test], psi[test] = part.r, part.m, part.psi
        values = NuisanceValues(r, m, psi)

    if values.r.shape[0] != d.n:
        raise ValueError(f"nuisance values cover {values.r.shape[0]} rows, dataset has {d.n}")
    for name in ("r", "m", "psi"):
        arr = getattr(values, name)
        if not np.all(np.isfinite(arr)):
            row = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise EstimationError(f"non-finite nuisance {name} at row {row}", stage="score",
                                  info={"row": row, "component": name})
    over = np.flatnonzero(values.r > EXPONENT_CAP)
    if over.size:
        raise EstimationError(
            f"pathological nuisance: r(X) exceeds {EXPONENT_CAP} at {over.size} rows "
            f"(first row {int(over[0])})", stage="score", info={"row": int(over[0])})
    return values


def _mean(v: np.ndarray, sample_weight: Optional[np.ndarray]) -> float:
    if sample_weight is None:
        return float(np.mean(v))
    return float(np.average(v, weights=sample_weight))


def _scores(d: Dataset, beta: float, values: NuisanceValues,
            row_weight: Optional[np.ndarray]) -> np.ndarray:
    h = score_h(d.y, d.a, beta, values.r, values.m, values.psi)
    return h if row_weight is None else h * row_weight


def score_vector(d: Dataset, beta: float, eta: NuisanceInput,
                 folds: Optional[FoldAssignment] = None,
                 row_weight: Optional[np.ndarray] = None) -> np.ndarray:
    return _scores(d, beta, evaluate_nuisances(d, eta, folds), row_weight)


def estimating_value(d: Dataset, beta: float, eta: NuisanceInput,
                     folds: Optional[FoldAssignment] = None,
                     row_weight: Optional[np.ndarray] = None,
                     sample_weight: Optional[np.ndarray] = None) -> float:
    """(Weighted) sample mean of the score at ``beta``."""
    return _mean(score_vector(d, beta, eta, folds, row_weight), sample_weight)


def solve_beta(d: Dataset, eta: NuisanceInput, folds: Optional[FoldAssignment] = None,
               init: float = 0.0, tol: float = 1e-8,
               row_weight: Optional[np.ndarray] = None,
               sample_weight: Optional[np.ndarray] = None) -> float:
    """Root in beta of the estimating equation."""
    values = evaluate_nuisances(d, eta, folds)

    def equation(beta: float) -> float:
        return _mean(_scores(d, beta, values, row_weight), sample_weight)

    return solve_scalar_root(equation, init=init, tol=tol)


def multiplier_bootstrap_ci(beta_hat: float, i_bar: float, scores: np.ndarray, b: int = 500,
                            level: float = 0.95, seed: int = 0) -> Tuple[float, float]:
    """Percentile interval of ``beta_hat + mean(xi * h) / i_bar`` over ``b`` Gaussian draws.

    Draw ``k`` uses its own stream derived from ``(seed, k)``.
    """
    if b < 100:
        raise ValueError(f"bootstrap needs at least 100 draws, got {b}")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    scores = np.asarray(scores, dtype=float).reshape(-1)
    n = scores.shape[0]
    if not np.any(scores):
        return float(beta_hat), float(beta_hat)
    draws = np.empty(b)
    for k in range(b):
        xi = np.random.default_rng(derive_seed(seed, k)).standard_normal(n)
        draws[k] = xi @ scores / n
    draws = beta_hat + draws / i_bar
    alpha = 1.0 - level
    low, high = np.quantile(draws, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(low), float(high)


def plug_in_inference(d: Dataset, beta_hat: float, eta: NuisanceInput,
                      folds: Optional[FoldAssignment] = None,
                      extra_a_weight: Optional[np.ndarray] = None,
                      level: float = 0.95, bootstrap_draws: int = 0,
                      seed: int = 0) -> InferenceResult:
    """Sandwich standard error, normal interval and (optionally) multiplier-bootstrap interval.

    ``extra_a_weight`` multiplies every row of the score and of the slope
    estimate. With ``bootstrap_draws > 0`` the reported ``ci_low``/``ci_high``
    are the bootstrap percentile interval; otherwise they are the normal one.
    """
    values = evaluate_nuisances(d, eta, folds)
    weight = np.ones(d.n) if extra_a_weight is None else np.asarray(extra_a_weight, dtype=float)
    slope = values.psi * d.y * np.exp(-beta_hat * d.a) * d.a * (d.a - values.m) * weight
    i_bar = float(np.mean(slope))
    if not abs(i_bar) >= I_BAR_FLOOR:
        raise DegenerateInferenceError(f"slope estimate |I| = {abs(i_bar):.3g} is numerically zero",
                                       stage="inference", info={"i_bar": i_bar})
    h = _scores(d, beta_hat, values, weight)
    sigma = float(np.sqrt(np.mean(h * h)) / abs(i_bar))
    se = sigma / np.sqrt(d.n)
    z = float(norm.ppf(0.5 + level / 2.0))
    degenerate = se == 0.0
    if degenerate:
        logger.warning("plug-in standard error is zero; interval collapses to the estimate")
        p_value = 1.0 if beta_hat == 0.0 else 0.0
    else:
        p_value = float(2.0 * norm.sf(abs(beta_hat) / se))
    normal = (beta_hat - z * se, beta_hat + z * se)
    ci = normal
    if bootstrap_draws > 0:
        ci = multiplier_bootstrap_ci(beta_hat, i_bar, h, b=bootstrap_draws, level=level, seed=seed)
    return InferenceResult(
        beta_hat=float(beta_hat),
        i_bar=i_bar,
        sigma_hat=sigma,
        se=float(se),
        ci_low=float(ci[0]),
        ci_high=float(ci[1]),
        p_value=p_value,
        bootstrap_draws=int(bootstrap_draws),
        normal_ci_low=float(normal[0]),
        normal_ci_high=float(normal[1]),
        level=level,
        n=d.n,
        degenerate=degenerate,
    )
