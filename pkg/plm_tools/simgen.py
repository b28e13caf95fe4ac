"""
Simulation designs and the Monte Carlo replicate harness.

Configurations:
    hd-i    (A, X) | Y=j Gaussian with a shared sparse precision; r and m linear.
    hd-ii   class-specific precisions; r has interactions, m linear.
    hd-iii  X Gaussian, A with interactions given X, Y logistic; r linear.
    ml      clipped equicorrelated X, nonlinear a0 and r0, beta = 1.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Optional, Sequence, Tuple
import logging
import time

import numpy as np
from joblib import Parallel, delayed
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import LinAlgError, cholesky
from scipy.special import expit

from .data import Dataset, derive_seed
from .dml import DmlConfig, fit_dml
from .exceptions import EstimationError, SimulationError
from .hd import HdConfig, fit_hd
from .score import InferenceResult, NuisanceSet

logger = logging.getLogger(__name__)

CONFIGS = ("hd-i", "hd-ii", "hd-iii", "ml")
DEFAULT_P = {"hd-i": 200, "hd-ii": 200, "hd-iii": 200, "ml": 20}
MIN_P = {"hd-i": 5, "hd-ii": 5, "hd-iii": 5, "ml": 12}
TRUE_BETA = {"hd-i": 0.5, "hd-ii": 0.5, "hd-iii": 0.5, "ml": 1.0}

ZETA_A = np.array([2.0, -2.0, 1.0, 1.0, 0.5, -0.5, 0.2, 0.2])
ZETA_R = np.array([0.1, 0.1, 0.1, -0.5, 0.5, 1.0, -1.0, 0.25, -0.25])
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class GeneratorSpec:
    """Design, sample size, covariate dimension (None picks the design default) and seed."""
    config: str
    n: int
    p: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.config not in CONFIGS:
            raise ValueError(f"config must be one of {CONFIGS}, got {self.config!r}")
        if self.n < 50:
            raise ValueError(f"n must be at least 50, got {self.n}")
        p = DEFAULT_P[self.config] if self.p is None else int(self.p)
        if p < MIN_P[self.config]:
            raise ValueError(f"{self.config} needs p >= {MIN_P[self.config]}, got {p}")
        object.__setattr__(self, "p", p)


def hd_precision(p: int, interactions: bool = False) -> np.ndarray:
    """(p+1) x (p+1) precision of (A, X); ``interactions`` adds the 0.075 block on X1..X3."""
    omega = np.diag(np.full(p + 1, 1.2))
    omega[0, 0] = 1.5
    omega[0, 1:5] = omega[1:5, 0] = 0.2
    if interactions:
        for i, j in ((1, 2), (1, 3), (2, 3)):
            omega[i, j] = omega[j, i] = 0.075
    return omega


def hd_case_mean(p: int) -> np.ndarray:
    mu = np.zeros(p + 1)
    mu[:3] = (0.4, -0.25, -0.25)
    return mu


def hd_iii_covariance(p: int) -> np.ndarray:
    sigma = np.diag(np.full(p, 0.5))
    block = np.full((4, 4), 0.15)
    np.fill_diagonal(block, 0.5)
    sigma[:4, :4] = block
    return sigma


def basis_a(x: np.ndarray) -> np.ndarray:
    """The 8 nonlinear features whose loadings define a0 in the ml design."""
    return np.column_stack([
        expit(-x[:, 0]), expit(-x[:, 1]), np.sin(x[:, 2]), np.cos(x[:, 3]),
        (x[:, 4] > 0).astype(float), (x[:, 5] > 0).astype(float),
        x[:, 6] * x[:, 7], x[:, 8] * x[:, 9],
    ])


def basis_r(x: np.ndarray) -> np.ndarray:
    """The 9 nonlinear features whose loadings define r0 in the ml design."""
    return np.column_stack([
        x[:, 0] * x[:, 1] * x[:, 2], x[:, 3] * x[:, 4], x[:, 5] ** 3, np.sin(x[:, 6]) ** 2,
        np.cos(x[:, 7]), 1.0 / (1.0 + x[:, 8] ** 2), expit(-x[:, 9]),
        (x[:, 10] > 0).astype(float), (x[:, 11] > 0).astype(float),
    ])


class GaussianLogRatio:
    """r0(x): log density ratio of (0, x) between the case and control Gaussians."""

    def __init__(self, omega0: np.ndarray, omega1: np.ndarray, mu1: np.ndarray):
        self.omega0 = omega0
        self.omega1 = omega1
        self.mu1 = mu1
        self.const = 0.5 * (np.linalg.slogdet(omega1)[1] - np.linalg.slogdet(omega0)[1])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = np.column_stack([np.zeros(x.shape[0]), x])
        dev = z - self.mu1
        return (self.const - 0.5 * np.einsum("ij,jk,ik->i", dev, self.omega1, dev)
                + 0.5 * np.einsum("ij,jk,ik->i", z, self.omega0, z))


class LinearFunction:
    def __init__(self, coef: np.ndarray, intercept: float = 0.0):
        self.coef = np.asarray(coef, dtype=float)
        self.intercept = intercept

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.intercept + x[:, :self.coef.shape[0]] @ self.coef


class HdIiiMean:
    """E[A | X] in hd-iii: linear terms plus pairwise interactions of X1..X3."""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (0.15 * x[:, :4].sum(axis=1)
                + 0.075 * (x[:, 0] * x[:, 1] + x[:, 0] * x[:, 2] + x[:, 1] * x[:, 2]))


class BasisFunction:
    def __init__(self, basis: Callable[[np.ndarray], np.ndarray], zeta: np.ndarray):
        self.basis = basis
        self.zeta = zeta

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.basis(x) @ self.zeta


class ControlMeanQuadrature:
    """E[A | X, Y=0] when A | X ~ N(a0(X), 1) and P(Y=1 | A, X) = expit(beta A + r0(X)).

    Gauss-Hermite quadrature over the unit-variance Gaussian.
    """

    def __init__(self, a0: Callable, r0: Callable, beta: float, degree: int = 80):
        self.a0 = a0
        self.r0 = r0
        self.beta = beta
        self.nodes, self.weights = hermegauss(degree)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        a = self.a0(x)[:, None] + self.nodes[None, :]
        control = expit(-(self.beta * a + self.r0(x)[:, None])) * self.weights[None, :]
        return (a * control).sum(axis=1) / control.sum(axis=1)


@dataclass(frozen=True, eq=False)
class SimulatedData:
    """A generated dataset with its true beta and the known nuisances (None when unknown)."""
    dataset: Dataset
    true_beta: float
    spec: GeneratorSpec
    r0: Optional[Callable[[np.ndarray], np.ndarray]] = None
    m0: Optional[Callable[[np.ndarray], np.ndarray]] = None
    a0: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def oracle(self) -> NuisanceSet:
        if self.r0 is None or self.m0 is None:
            raise ValueError(f"{self.spec.config} has no closed-form m0; oracle unavailable")
        return NuisanceSet(r=self.r0, m=self.m0)


def _gaussian_draw(rng: np.random.Generator, cov: np.ndarray, size: int) -> np.ndarray:
    """Rows of N(0, cov) via the upper Cholesky factor."""
    try:
        upper = cholesky(cov, lower=False)
    except LinAlgError as e:
        raise SimulationError("covariance matrix is not positive definite",
                              stage="generate") from e
    return rng.standard_normal((size, cov.shape[0])) @ upper


def _generate_hd_gaussian(spec: GeneratorSpec, rng: np.random.Generator,
                          interactions: bool) -> SimulatedData:
    p, n = spec.p, spec.n
    omega1 = hd_precision(p)
    omega0 = hd_precision(p, interactions)
    mu1 = hd_case_mean(p)
    y = (rng.random(n) < 0.5).astype(float)
    z = np.empty((n, p + 1))
    cases = y == 1
    z[cases] = mu1 + _gaussian_draw(rng, np.linalg.inv(omega1), int(cases.sum()))
    z[~cases] = _gaussian_draw(rng, np.linalg.inv(omega0), int((~cases).sum()))
    control_slope = -omega0[0, 1:] / omega0[0, 0]
    return SimulatedData(
        dataset=Dataset(y, z[:, 0], z[:, 1:]),
        true_beta=TRUE_BETA[spec.config],
        spec=spec,
        r0=GaussianLogRatio(omega0, omega1, mu1),
        m0=LinearFunction(control_slope),
    )


def _generate_hd_iii(spec: GeneratorSpec, rng: np.random.Generator) -> SimulatedData:
    x = _gaussian_draw(rng, hd_iii_covariance(spec.p), spec.n)
    a0 = HdIiiMean()
    a = a0(x) + rng.standard_normal(spec.n)
    r0 = LinearFunction(np.array([0.25, 0.25, 0.1, 0.1]))
    y = (rng.random(spec.n) < expit(0.5 * a + r0(x))).astype(float)
    return SimulatedData(Dataset(y, a, x), TRUE_BETA["hd-iii"], spec, r0=r0, a0=a0)


def _generate_ml(spec: GeneratorSpec, rng: np.random.Generator) -> SimulatedData:
    cov = np.full((spec.p, spec.p), 0.2)
    np.fill_diagonal(cov, 1.0)
    x = np.clip(_gaussian_draw(rng, cov, spec.n), -2.0, 2.0)
    a0 = BasisFunction(basis_a, ZETA_A)
    r0 = BasisFunction(basis_r, ZETA_R)
    beta = TRUE_BETA["ml"]
    a = a0(x) + rng.standard_normal(spec.n)
    y = (rng.random(spec.n) < expit(beta * a + r0(x))).astype(float)
    return SimulatedData(Dataset(y, a, x), beta, spec, r0=r0,
                         m0=ControlMeanQuadrature(a0, r0, beta), a0=a0)


def generate(spec: GeneratorSpec) -> SimulatedData:
    """Draw one dataset; deterministic given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    if spec.config == "hd-i":
        return _generate_hd_gaussian(spec, rng, interactions=False)
    if spec.config == "hd-ii":
        return _generate_hd_gaussian(spec, rng, interactions=True)
    if spec.config == "hd-iii":
        return _generate_hd_iii(spec, rng)
    return _generate_ml(spec, rng)


@dataclass(frozen=True)
class ReplicateRecord:
    replicate: int
    seed: int
    beta_hat: float = float("nan")
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    se: float = float("nan")
    ok: bool = True
    error: str = ""

    def covers(self, beta: float) -> bool:
        return self.ci_low <= beta <= self.ci_high


@dataclass(frozen=True, eq=False)
class SimReport:
    config: str
    n: int
    p: int
    estimator: str
    true_beta: float
    records: Tuple[ReplicateRecord, ...]
    mse: float
    bias: float
    cp: float
    n_ok: int
    failures: int
    runtime_seconds: float = 0.0

    @property
    def estimates(self) -> np.ndarray:
        return np.array([[r.beta_hat, r.ci_low, r.ci_high] for r in self.records if r.ok])


def aggregate(records: Sequence[ReplicateRecord], true_beta: float) -> Dict[str, float]:
    """MSE, |mean error| bias and coverage over the successful replicates."""
    ok = [r for r in records if r.ok]
    if not ok:
        raise SimulationError("no successful replicates to aggregate", stage="aggregate")
    beta = np.array([r.beta_hat for r in ok])
    err = beta - true_beta
    return {
        "mse": float(np.mean(err ** 2)),
        "bias": float(abs(np.mean(err))),
        "cp": float(np.mean([r.covers(true_beta) for r in ok])),
        "n_ok": len(ok),
        "failures": len(records) - len(ok),
    }


def _as_record(replicate: int, seed: int, result: Any) -> ReplicateRecord:
    if isinstance(result, InferenceResult):
        return ReplicateRecord(replicate, seed, result.beta_hat, result.ci_low, result.ci_high,
                               result.se)
    beta, low, high = result[:3]
    se = result[3] if len(result) > 3 else float("nan")
    return ReplicateRecord(replicate, seed, float(beta), float(low), float(high), float(se))


def _run_one(spec: GeneratorSpec, estimator: Callable, replicate: int) -> ReplicateRecord:
    seed = derive_seed(spec.seed, replicate)
    sim = generate(replace(spec, seed=seed))
    try:
        return _as_record(replicate, seed, estimator(sim))
    except (EstimationError, ValueError, FloatingPointError,
            np.linalg.LinAlgError) as e:
        logger.warning(f"replicate {replicate} failed: {e}")
        return ReplicateRecord(replicate, seed, ok=False, error=str(e))


def run_replicates(spec: GeneratorSpec, estimator: Callable[[SimulatedData], Any],
                   replicates: int, n_jobs: int = 1) -> SimReport:
    """Generate and fit ``replicates`` datasets; replicate r uses seed (spec.seed, r).

    ``estimator`` maps a SimulatedData to an InferenceResult or a
    ``(beta_hat, ci_low, ci_high[, se])`` tuple. Results do not depend on ``n_jobs``.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    start = time.perf_counter()
    records = Parallel(n_jobs=n_jobs)(
        delayed(_run_one)(spec, estimator, r) for r in range(replicates))
    failures = sum(1 for r in records if not r.ok)
    if failures > MAX_FAILURE_RATE * replicates:
        raise SimulationError(f"{failures} of {replicates} replicates failed",
                              stage="replicates", info={"failures": failures,
                                                        "first_error": next(
                                                            r.error for r in records if not r.ok)})
    true_beta = TRUE_BETA[spec.config]
    summary = aggregate(records, true_beta)
    logger.info(f"{spec.config} n={spec.n}: mse={summary['mse']:.4g} bias={summary['bias']:.4g} "
                f"cp={summary['cp']:.3f} ({failures} failures)")
    return SimReport(
        config=spec.config, n=spec.n, p=spec.p, estimator=getattr(estimator, "name", "custom"),
        true_beta=true_beta, records=tuple(records), mse=summary["mse"], bias=summary["bias"],
        cp=summary["cp"], n_ok=summary["n_ok"], failures=failures,
        runtime_seconds=time.perf_counter() - start,
    )


@dataclass(frozen=True)
class HdEstimator:
    """Replicate adapter for the high-dimensional pipeline; the replicate seed drives CV folds."""
    cfg: HdConfig = field(default_factory=HdConfig)
    name: str = "hd"

    def __call__(self, sim: SimulatedData) -> InferenceResult:
        return fit_hd(sim.dataset, replace(self.cfg, seed=sim.spec.seed)).inference


@dataclass(frozen=True, eq=False)
class DmlEstimator:
    """Replicate adapter for the cross-fitted pipeline, optionally with oracle nuisances."""
    cfg: DmlConfig = field(default_factory=DmlConfig)
    use_oracle: bool = False
    name: str = "dml"

    def __call__(self, sim: SimulatedData) -> InferenceResult:
        oracle = sim.oracle() if self.use_oracle else None
        cfg = replace(self.cfg, seed=sim.spec.seed)
        return fit_dml(sim.dataset, cfg, oracle=oracle).inference
