"""
Penalized convex M-estimation and scalar root finding.

Every penalized problem has the form

    (1/n) * sum_i w_i * loss(offset_i + x_i @ b; y_i) + lam * sum_{j penalized} |b_j|

and is solved by cyclic coordinate descent with a proximal Newton step per
coordinate. Convergence is certified by the subgradient (KKT) residual.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple
import logging
import warnings

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import brentq
from scipy.special import expit

from .data import FoldAssignment
from .exceptions import (
    DegenerateFoldWarning,
    ExponentGuardWarning,
    RootFindingError,
    SolverError,
)

logger = logging.getLogger(__name__)

LOSS_KINDS = ("squared", "logistic", "weighted-link-integral", "calibration-exponential")
LINKS = ("identity", "expit")
EXPONENT_CAP = 30.0
DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 10000
_MAX_HALVINGS = 40


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def loss_terms(kind: str, y: np.ndarray, u: np.ndarray,
               link: str = "identity") -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Per-sample loss, first and second derivative in ``u``, and exponent-cap count."""
    if kind == "squared":
        r = y - u
        return 0.5 * r * r, -r, np.ones_like(u), 0
    if kind == "logistic":
        p = expit(u)
        return np.logaddexp(0.0, u) - y * u, p - y, p * (1.0 - p), 0
    if kind == "weighted-link-integral":
        if link == "identity":
            return -y * u + 0.5 * u * u, u - y, np.ones_like(u), 0
        p = expit(u)
        return -y * u + np.logaddexp(0.0, u), p - y, p * (1.0 - p), 0
    if kind == "calibration-exponential":
        capped = -u > EXPONENT_CAP
        e = np.exp(np.minimum(-u, EXPONENT_CAP))
        return y * e + (1.0 - y) * u, -y * e + (1.0 - y), y * e, int(capped.sum())
    raise ValueError(f"Unknown loss kind: {kind}")


@dataclass(frozen=True, eq=False)
class PenalizedProblem:
    """Data of one L1-penalized problem. ``penalty_mask[j]`` False leaves ``b_j`` unpenalized."""
    loss_kind: str
    design: np.ndarray
    response: np.ndarray
    weights: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    lam: float = 0.0
    penalty_mask: Optional[np.ndarray] = None
    link: str = "identity"

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}, got {self.link!r}")
        x = np.asarray(self.design, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        n, p = x.shape
        y = np.asarray(self.response, dtype=float).reshape(-1)
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float).reshape(-1)
        off = np.zeros(n) if self.offset is None else np.asarray(self.offset, dtype=float).reshape(-1)
        mask = (np.ones(p, dtype=bool) if self.penalty_mask is None
                else np.asarray(self.penalty_mask, dtype=bool).reshape(-1))
        if y.shape[0] != n or w.shape[0] != n or off.shape[0] != n or mask.shape[0] != p:
            raise ValueError("design, response, weights, offset and penalty_mask disagree in size")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(off))):
            raise ValueError("design, response and offset must be finite")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and nonnegative, got {self.lam}")
        if self.loss_kind in ("logistic", "calibration-exponential") and np.any((y != 0) & (y != 1)):
            raise ValueError(f"{self.loss_kind} loss requires a binary response")
        object.__setattr__(self, "design", x)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "penalty_mask", mask)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def n(self) -> int:
        return int(self.design.shape[0])

    @property
    def p(self) -> int:
        return int(self.design.shape[1])

    def with_lambda(self, lam: float) -> "PenalizedProblem":
        return replace(self, lam=lam)

    def subset(self, indices: Sequence[int]) -> "PenalizedProblem":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, design=self.design[idx], response=self.response[idx],
                       weights=self.weights[idx], offset=self.offset[idx])

    def terms(self, coef: np.ndarray):
        return loss_terms(self.loss_kind, self.response, self.offset + self.design @ coef, self.link)

    def data_loss(self, coef: np.ndarray) -> float:
        """Weighted mean loss without the penalty."""
        loss, _, _, _ = self.terms(coef)
        return float(np.mean(self.weights * loss))

    def objective(self, coef: np.ndarray) -> float:
        return self.data_loss(coef) + self.lam * float(np.abs(coef[self.penalty_mask]).sum())

    def gradient(self, coef: np.ndarray) -> np.ndarray:
        _, d1, _, _ = self.terms(coef)
        return self.design.T @ (self.weights * d1) / self.n

    def kkt_residual(self, coef: np.ndarray, grad: Optional[np.ndarray] = None) -> float:
        g = self.gradient(coef) if grad is None else grad
        return float(kkt_violations(g, coef, self.lam, self.penalty_mask).max(initial=0.0))


def kkt_violations(grad: np.ndarray, coef: np.ndarray, lam: float, mask: np.ndarray) -> np.ndarray:
    """Coordinatewise distance of ``-grad`` from the subdifferential of the penalty."""
    out = np.abs(grad).astype(float)
    nz = mask & (coef != 0)
    out[nz] = np.abs(grad[nz] + lam * np.sign(coef[nz]))
    zero = mask & (coef == 0)
    out[zero] = np.maximum(np.abs(grad[zero]) - lam, 0.0)
    return out


@dataclass(frozen=True, eq=False)
class Solution:
    coef: np.ndarray
    objective: float
    kkt_residual: float
    gradient_sup: float
    iterations: int
    converged: bool
    lam: float
    guard_events: int = 0
    trace: Tuple[float, ...] = field(default_factory=tuple)


class _CoordinateDescent:
    """Mutable solver state for one problem: coefficients and linear predictor."""

    def __init__(self, prob: PenalizedProblem, init: Optional[np.ndarray]):
        self.prob = prob
        self.coef = np.zeros(prob.p) if init is None else np.array(init, dtype=float).reshape(-1)
        if self.coef.shape[0] != prob.p:
            raise ValueError(f"warm start has length {self.coef.shape[0]}, expected {prob.p}")
        self.u = prob.offset + prob.design @ self.coef
        self.exact = prob.loss_kind == "squared" or (
            prob.loss_kind == "weighted-link-integral" and prob.link == "identity")
        self.sweeps = 0

    def _coordinate_objective(self, j: int, value: float) -> float:
        prob = self.prob
        u = self.u + (value - self.coef[j]) * prob.design[:, j]
        loss, _, _, _ = loss_terms(prob.loss_kind, prob.response, u, prob.link)
        pen = prob.lam * abs(value) if prob.penalty_mask[j] else 0.0
        return float(np.mean(prob.weights * loss)) + pen

    def update(self, j: int) -> None:
        prob = self.prob
        xj = prob.design[:, j]
        _, d1, d2, _ = loss_terms(prob.loss_kind, prob.response, self.u, prob.link)
        g = float(np.mean(prob.weights * d1 * xj))
        h = float(np.mean(prob.weights * d2 * xj * xj))
        if not (np.isfinite(g) and np.isfinite(h)):
            raise SolverError(f"non-finite gradient at sweep {self.sweeps}, coordinate {j}",
                              stage="solver", info={"iteration": self.sweeps, "coordinate": j})
        if h <= 1e-12:
            return
        old = self.coef[j]
        z = old - g / h
        target = float(soft_threshold(z, prob.lam / h)) if prob.penalty_mask[j] else z
        delta = target - old
        if delta == 0.0:
            return
        if not self.exact:
            # Backtracking halving keeps the objective non-increasing.
            current = self._coordinate_objective(j, old)
            step = 1.0
            for _ in range(_MAX_HALVINGS):
                trial = self._coordinate_objective(j, old + step * delta)
                if np.isfinite(trial) and trial <= current:
                    break
                step *= 0.5
            else:
                return
            delta *= step
        self.coef[j] = old + delta
        self.u += delta * xj

    def sweep(self, coords: np.ndarray) -> float:
        for j in coords:
            self.update(int(j))
        self.sweeps += 1
        obj = self.prob.objective(self.coef)
        if not np.isfinite(obj):
            raise SolverError(f"non-finite objective after sweep {self.sweeps}",
                              stage="solver", info={"iteration": self.sweeps})
        return obj


def solve_penalized(prob: PenalizedProblem, tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER, init: Optional[np.ndarray] = None,
                    record_trace: bool = False) -> Solution:
    """Minimize the penalized objective of ``prob`` by cyclic coordinate descent.

    Each iteration is one sweep. A full sweep over all coordinates is followed
    by sweeps restricted to the active set (unpenalized or nonzero) until the
    active set is stationary; the loop stops when the full KKT residual is
    at most ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    state = _CoordinateDescent(prob, init)
    everything = np.arange(prob.p)
    trace = [prob.objective(state.coef)] if record_trace else []
    converged = False

    while state.sweeps < max_iter:
        obj = state.sweep(everything)
        if record_trace:
            trace.append(obj)
        grad = prob.gradient(state.coef)
        violations = kkt_violations(grad, state.coef, prob.lam, prob.penalty_mask)
        if violations.max(initial=0.0) <= tol:
            converged = True
            break
        active = np.flatnonzero(~prob.penalty_mask | (state.coef != 0))
        while active.size and state.sweeps < max_iter:
            obj = state.sweep(active)
            if record_trace:
                trace.append(obj)
            grad = prob.gradient(state.coef)
            violations = kkt_violations(grad, state.coef, prob.lam, prob.penalty_mask)
            if violations[active].max() <= tol:
                break

    coef = state.coef
    grad = prob.gradient(coef)
    kkt = float(kkt_violations(grad, coef, prob.lam, prob.penalty_mask).max(initial=0.0))
    converged = converged or kkt <= tol
    pen = prob.penalty_mask
    _, _, _, guard = prob.terms(coef)
    if guard:
        warnings.warn(f"exponent capped at {EXPONENT_CAP} for {guard} of {prob.n} samples",
                      ExponentGuardWarning, stacklevel=2)
    if not converged:
        logger.warning(f"{prob.loss_kind} solver stopped after {state.sweeps} sweeps "
                       f"with KKT residual {kkt:.3g} (lambda={prob.lam:.4g})")
    else:
        logger.debug(f"{prob.loss_kind} solver converged in {state.sweeps} sweeps, "
                     f"{int(np.count_nonzero(coef[pen]))} nonzero penalized coefficients")
    return Solution(
        coef=coef,
        objective=prob.objective(coef),
        kkt_residual=kkt,
        gradient_sup=float(np.abs(grad[pen]).max(initial=0.0)),
        iterations=state.sweeps,
        converged=converged,
        lam=prob.lam,
        guard_events=guard,
        trace=tuple(trace),
    )


def default_lambda_grid(n: int, p: int, scale: Tuple[float, float] = (0.2, 2.0),
                        size: int = 20) -> np.ndarray:
    """Descending log-spaced grid on ``[scale[0], scale[1]] * sqrt(log(p) / n)``.

    ``p`` counts covariates; values below 2 are treated as 2.
    """
    low, high = scale
    if not 0 < low < high:
        raise ValueError(f"grid scale must satisfy 0 < low < high, got {scale}")
    if size < 1:
        raise ValueError("grid size must be at least 1")
    base = np.sqrt(np.log(max(p, 2)) / n)
    return np.geomspace(high * base, low * base, size)


def _is_degenerate_split(prob: PenalizedProblem) -> bool:
    if prob.n == 0 or not np.any(prob.weights > 0):
        return True
    if prob.loss_kind in ("logistic", "calibration-exponential"):
        return np.unique(prob.response).shape[0] < 2
    return False


def _fold_path(prob: PenalizedProblem, grid: np.ndarray, train: np.ndarray, test: np.ndarray,
               scoring: Optional[Callable[[PenalizedProblem, np.ndarray], float]],
               tol: float, max_iter: int, init: Optional[np.ndarray]) -> np.ndarray:
    fit_prob = prob.subset(train)
    held_out = prob.subset(test)
    losses = np.empty(grid.shape[0])
    coef = init
    for i, lam in enumerate(grid):
        sol = solve_penalized(fit_prob.with_lambda(float(lam)), tol=tol, max_iter=max_iter,
                              init=coef)
        coef = sol.coef
        losses[i] = (held_out.data_loss(coef) if scoring is None
                     else scoring(held_out, coef))
    return losses


def cv_losses(prob: PenalizedProblem, grid: Sequence[float], folds: FoldAssignment,
              scoring: Optional[Callable[[PenalizedProblem, np.ndarray], float]] = None,
              tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              init: Optional[np.ndarray] = None, n_jobs: int = 1) -> np.ndarray:
    """Mean held-out loss per grid value over the non-degenerate folds."""
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    if np.any(np.diff(grid) > 0):
        raise ValueError("lambda grid must be sorted in descending order")
    if folds.n != prob.n:
        raise ValueError(f"fold assignment covers {folds.n} rows, problem has {prob.n}")

    usable = []
    for fold, train, test in folds.splits():
        if _is_degenerate_split(prob.subset(train)) or _is_degenerate_split(prob.subset(test)):
            warnings.warn(f"cross-validation fold {fold} skipped: degenerate split",
                          DegenerateFoldWarning, stacklevel=2)
            continue
        usable.append((train, test))
    if not usable:
        raise SolverError("every cross-validation fold is degenerate", stage="cv",
                          info={"folds": folds.k})

    paths = Parallel(n_jobs=n_jobs)(
        delayed(_fold_path)(prob, grid, train, test, scoring, tol, max_iter, init)
        for train, test in usable)
    return np.mean(np.vstack(paths), axis=0)


def cv_select_lambda(prob: PenalizedProblem, grid: Sequence[float], folds: FoldAssignment,
                     scoring: Optional[Callable[[PenalizedProblem, np.ndarray], float]] = None,
                     tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                     init: Optional[np.ndarray] = None, n_jobs: int = 1) -> float:
    """Grid value minimizing the mean held-out loss; ties go to the larger value."""
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 1:
        return float(grid[0])
    losses = cv_losses(prob, grid, folds, scoring=scoring, tol=tol, max_iter=max_iter,
                       init=init, n_jobs=n_jobs)
    best = int(np.argmin(losses))
    logger.info(f"CV selected lambda={grid[best]:.5g} ({prob.loss_kind}, "
                f"held-out loss {losses[best]:.6g})")
    return float(grid[best])


def solve_scalar_root(f: Callable[[float], float], init: float = 0.0, tol: float = 1e-8,
                      max_expand: float = 50.0, first_step: float = 0.1) -> float:
    """Root of a continuous scalar function near ``init``.

    The bracket grows geometrically on both sides of ``init`` until a sign
    change is found or the half width exceeds ``max_expand``; Brent's method
    then refines it.
    """
    f0 = float(f(init))
    if f0 == 0.0:
        return float(init)

    left, right = (init, f0), (init, f0)
    left_open, right_open = np.isfinite(f0), np.isfinite(f0)
    width = first_step
    bracket = None
    while bracket is None and (left_open or right_open):
        if right_open:
            x = init + width
            fx = float(f(x))
            if not np.isfinite(fx):
                right_open = False
            elif right[1] * fx <= 0:
                bracket = (right[0], x)
            else:
                right = (x, fx)
        if bracket is None and left_open:
            x = init - width
            fx = float(f(x))
            if not np.isfinite(fx):
                left_open = False
            elif left[1] * fx <= 0:
                bracket = (x, left[0])
            else:
                left = (x, fx)
        if width >= max_expand:
            break
        width = min(2.0 * width, max_expand)
        logger.debug(f"root bracket expanded to +/-{width:g} around {init:g}")

    if bracket is None:
        raise RootFindingError(
            f"no sign change within [{init - max_expand:g}, {init + max_expand:g}]",
            stage="root", info={"init": init, "max_expand": max_expand})
    root = brentq(f, bracket[0], bracket[1], xtol=1e-15, rtol=4 * np.finfo(float).eps,
                  maxiter=500)
    value = float(f(root))
    if not abs(value) <= tol:
        raise RootFindingError(f"root refinement left |f|={abs(value):.3g} > {tol:g}",
                               stage="root", info={"root": root, "value": value})
    return float(root)
