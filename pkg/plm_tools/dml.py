"""
Cross-fitted (double machine learning) estimator of beta.

For every outer fold k the nuisances are learned on the other folds only:
m-hat from controls, r-hat by full model refitting (FMR) with an inner
cross-fitting split, and psi-hat = expit(-r-hat). The cross-fitted
estimating equation is then solved for beta.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logit

from .data import Dataset, FoldAssignment, derive_seed, make_folds
from .exceptions import DataValidationError, EstimationError, LearnerError, RootFindingError
from .learners import LearnerModel, LearnerSpec, fit_learner, select_best
from .score import (
    InferenceResult,
    NuisanceSet,
    evaluate_nuisances,
    plug_in_inference,
    score_vector,
    solve_beta,
)

logger = logging.getLogger(__name__)

R_VARIANTS = ("difference", "ratio")
COMPONENTS = ("m", "full", "a", "t")
RATIO_CLIP = 1e-3


def _spec(kind: str, objective: str = "squared") -> LearnerSpec:
    return LearnerSpec(kind, objective=objective)


@dataclass(frozen=True, eq=False)
class DmlConfig:
    """Cross-fitting configuration.

    ``learner_full`` is always fitted with the logistic objective and the
    other learners with the squared objective. A non-empty ``candidates``
    tuple replaces the fixed learners by per-fold, per-component selection.
    """
    k_outer: int = 5
    k_inner: int = 5
    learner_m: LearnerSpec = field(default_factory=lambda: _spec("boosted-trees"))
    learner_full: LearnerSpec = field(default_factory=lambda: _spec("boosted-trees", "logistic"))
    learner_a: LearnerSpec = field(default_factory=lambda: _spec("boosted-trees"))
    learner_t: LearnerSpec = field(default_factory=lambda: _spec("boosted-trees"))
    r_variant: str = "difference"
    seed: int = 0
    bootstrap_draws: int = 500
    level: float = 0.95
    n_jobs: int = 1
    candidates: Tuple[LearnerSpec, ...] = ()
    ratio_clip_fraction: float = 0.05
    beta_tol: float = 1e-8

    def __post_init__(self):
        if self.k_outer < 2 or self.k_inner < 2:
            raise ValueError("k_outer and k_inner must be at least 2")
        if self.r_variant not in R_VARIANTS:
            raise ValueError(f"r_variant must be one of {R_VARIANTS}, got {self.r_variant!r}")
        if self.bootstrap_draws != 0 and self.bootstrap_draws < 100:
            raise ValueError("bootstrap_draws must be 0 or at least 100")
        candidates = tuple(self.candidates)
        if len(candidates) == 1:
            raise ValueError("candidates must list at least two learner specs")
        object.__setattr__(self, "candidates", candidates)
        object.__setattr__(self, "learner_full", self.learner_full.with_objective("logistic"))
        for name in ("learner_m", "learner_a", "learner_t"):
            object.__setattr__(self, name, getattr(self, name).with_objective("squared"))

    @classmethod
    def for_learner(cls, kind: str, **kwargs: Any) -> "DmlConfig":
        """Config using one learner kind for every nuisance component."""
        return cls(learner_m=_spec(kind), learner_full=_spec(kind, "logistic"),
                   learner_a=_spec(kind), learner_t=_spec(kind), **kwargs)

    def learner(self, component: str) -> LearnerSpec:
        return getattr(self, f"learner_{component}")


class DifferenceR:
    """r-hat(x) = t-hat(x) - breve_beta * mean_j a-hat_j(x)."""

    def __init__(self, t_model: LearnerModel, a_models: Sequence[LearnerModel], breve_beta: float):
        self.t_model = t_model
        self.a_models = list(a_models)
        self.breve_beta = breve_beta

    def __call__(self, x: np.ndarray) -> np.ndarray:
        a_bar = np.mean([m.predict(x) for m in self.a_models], axis=0)
        return self.t_model.predict(x) - self.breve_beta * a_bar


class RatioR:
    """r-hat(x) = log(E[Y exp(-breve_beta A) | x] / E[1 - Y | x]), denominator clipped."""

    def __init__(self, numerator: LearnerModel, denominator: LearnerModel,
                 max_clip_fraction: float = 0.05):
        self.numerator = numerator
        self.denominator = denominator
        self.max_clip_fraction = max_clip_fraction

    def __call__(self, x: np.ndarray) -> np.ndarray:
        den = self.denominator.predict(x)
        clipped = den < RATIO_CLIP
        if clipped.mean() > self.max_clip_fraction:
            raise LearnerError(
                f"ratio denominator clipped at {int(clipped.sum())} of {den.shape[0]} points; "
                f"use the difference variant", stage="fmr-ratio",
                info={"clipped": int(clipped.sum())})
        num = np.maximum(self.numerator.predict(x), 1e-12)
        return np.log(num / np.maximum(den, RATIO_CLIP))


@dataclass(frozen=True, eq=False)
class FmrInner:
    """Output of the inner cross-fitting split of one outer training set."""
    breve_beta: float
    inner_folds: FoldAssignment
    full_models: List[LearnerModel]
    a_models: List[LearnerModel]
    pseudo_outcome: np.ndarray
    a_residual: np.ndarray


@dataclass(frozen=True, eq=False)
class FoldNuisance:
    fold: int
    nuisances: NuisanceSet
    breve_beta: float
    selected: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class DmlFit:
    folds: FoldAssignment
    nuisances: List[NuisanceSet]
    breve_betas: np.ndarray
    beta_hat: float
    inference: InferenceResult
    r_variant: str
    equation_residual: float
    fold_seed: int
    selected: List[Dict[str, str]] = field(default_factory=list)
    oracle: bool = False


def _covariate_dataset(d: Dataset) -> Dataset:
    if not d.has_intercept:
        return d
    return Dataset(d.y, d.a, d.covariates, x_names=d.x_names[1:], row_ids=d.row_ids)


def _check_classes(d: Dataset, what: str) -> None:
    if d.n_cases == 0 or d.n_cases == d.n:
        raise DataValidationError(f"{what} must contain both classes (cases: {d.n_cases} of {d.n})",
                                  info={"rows": d.n, "cases": d.n_cases})


def _full_design(d: Dataset) -> np.ndarray:
    return np.column_stack([d.a, d.x])


def fit_m_hat(train: Dataset, spec: LearnerSpec) -> LearnerModel:
    """Learner of A on X among the controls of ``train``."""
    controls = np.flatnonzero(train.y == 0)
    if controls.shape[0] < 10:
        raise LearnerError(f"too few controls to learn m: {controls.shape[0]} < 10",
                           info={"controls": int(controls.shape[0])})
    return fit_learner(spec.with_objective("squared"), train.x[controls], train.a[controls],
                       train_rows=train.row_ids[controls])


def fmr_breve_beta(train: Dataset, cfg: DmlConfig, seed: int = 0,
                   full_spec: Optional[LearnerSpec] = None,
                   a_spec: Optional[LearnerSpec] = None) -> FmrInner:
    """Inner cross-fitting: least-squares slope of logit(M-hat) on A - a-hat, no intercept."""
    full_spec = (full_spec or cfg.learner_full).with_objective("logistic")
    a_spec = (a_spec or cfg.learner_a).with_objective("squared")
    inner = make_folds(train.n, cfg.k_inner, derive_seed(seed, 0))
    w = np.empty(train.n)
    res = np.empty(train.n)
    full_models, a_models = [], []
    for j, tr, te in inner.splits():
        sub = train.subset(tr)
        _check_classes(sub, f"inner training split {j}")
        full = fit_learner(full_spec.with_seed(derive_seed(seed, 1, j)), _full_design(sub), sub.y,
                           train_rows=sub.row_ids)
        a_model = fit_learner(a_spec.with_seed(derive_seed(seed, 2, j)), sub.x, sub.a,
                              train_rows=sub.row_ids)
        held = train.subset(te)
        w[te] = logit(full.predict(_full_design(held)))
        res[te] = held.a - a_model.predict(held.x)
        full_models.append(full)
        a_models.append(a_model)
    denom = float(res @ res)
    if denom <= 1e-12 * train.n:
        raise LearnerError("exposure residual A - a-hat has zero variance",
                           info={"sum_sq": denom})
    breve = float(w @ res / denom)
    logger.debug(f"breve beta={breve:.6g} over {cfg.k_inner} inner folds")
    return FmrInner(breve, inner, full_models, a_models, w, res)


def fmr_fit_r(train: Dataset, breve_beta: float, inner: FmrInner, cfg: DmlConfig,
              seed: int = 0, t_spec: Optional[LearnerSpec] = None):
    """Evaluable r-hat from the refitting step; ``cfg.r_variant`` picks the form."""
    if not np.isfinite(breve_beta):
        raise LearnerError(f"breve beta is not finite: {breve_beta}")
    t_spec = (t_spec or cfg.learner_t).with_objective("squared")
    if cfg.r_variant == "difference":
        t_model = fit_learner(t_spec.with_seed(derive_seed(seed, 3)), train.x,
                              inner.pseudo_outcome, train_rows=train.row_ids)
        return DifferenceR(t_model, inner.a_models, breve_beta)
    if train.n_cases < 10:
        raise LearnerError(f"ratio variant needs at least 10 cases, got {train.n_cases}")
    numerator = fit_learner(t_spec.with_seed(derive_seed(seed, 4)), train.x,
                            train.y * np.exp(-breve_beta * train.a), train_rows=train.row_ids)
    denominator = fit_learner(t_spec.with_seed(derive_seed(seed, 5)), train.x, 1.0 - train.y,
                              train_rows=train.row_ids)
    return RatioR(numerator, denominator, cfg.ratio_clip_fraction)


def _models_of(r_hat) -> List[LearnerModel]:
    if isinstance(r_hat, DifferenceR):
        return [r_hat.t_model]
    if isinstance(r_hat, RatioR):
        return [r_hat.numerator, r_hat.denominator]
    return []


def _rows(models: Sequence[LearnerModel]) -> np.ndarray:
    rows = [m.train_rows for m in models if m.train_rows is not None]
    return np.unique(np.concatenate(rows)) if rows else np.empty(0, dtype=np.int64)


def _select(cfg: DmlConfig, component: str, c: np.ndarray, r: np.ndarray, seed: int) -> LearnerSpec:
    objective = "logistic" if component == "full" else "squared"
    if not cfg.candidates:
        return cfg.learner(component)
    specs = [s.with_objective(objective) for s in cfg.candidates]
    folds = make_folds(r.shape[0], cfg.k_inner, seed)
    return select_best(specs, c, r, folds)


def _fit_fold(d: Dataset, fold: int, train_idx: np.ndarray, cfg: DmlConfig) -> FoldNuisance:
    label = f"fold {fold}"
    seed = derive_seed(cfg.seed, 1, fold)
    train = d.subset(train_idx)
    try:
        _check_classes(train, "outer training split")
    except EstimationError as e:
        raise e.with_stage(label) from e

    selected: Dict[str, str] = {}
    try:
        controls = train.y == 0
        m_spec = _select(cfg, "m", train.x[controls], train.a[controls], derive_seed(seed, 10))
        m_model = fit_m_hat(train, m_spec.with_seed(derive_seed(seed, 11)))
        selected["m"] = m_spec.kind
    except EstimationError as e:
        raise e.with_stage(f"{label} / m-hat") from e

    try:
        full_spec = _select(cfg, "full", _full_design(train), train.y, derive_seed(seed, 12))
        a_spec = _select(cfg, "a", train.x, train.a, derive_seed(seed, 13))
        inner = fmr_breve_beta(train, cfg, derive_seed(seed, 14), full_spec, a_spec)
        t_spec = _select(cfg, "t", train.x, inner.pseudo_outcome, derive_seed(seed, 15))
        r_hat = fmr_fit_r(train, inner.breve_beta, inner, cfg, derive_seed(seed, 16), t_spec)
        selected.update(full=full_spec.kind, a=a_spec.kind, t=t_spec.kind)
    except EstimationError as e:
        raise e.with_stage(f"{label} / fmr") from e

    provenance = {
        "m": _rows([m_model]),
        "r": _rows(inner.full_models + inner.a_models + _models_of(r_hat)),
    }
    logger.info(f"{label}: breve beta={inner.breve_beta:.5g}")
    return FoldNuisance(fold, NuisanceSet(r=r_hat, m=m_model, provenance=provenance),
                        inner.breve_beta, selected)


def check_sample_splitting(fit: DmlFit, d: Dataset) -> bool:
    """Raise if any nuisance used on fold k was trained on a row of fold k."""
    for fold, _, test in fit.folds.splits():
        test_ids = set(d.row_ids[test].tolist())
        for component, rows in fit.nuisances[fold - 1].provenance.items():
            leaked = test_ids.intersection(np.asarray(rows).tolist())
            if leaked:
                raise EstimationError(
                    f"nuisance {component} of fold {fold} was trained on {len(leaked)} "
                    f"of its own rows", stage="sample-splitting",
                    info={"fold": fold, "component": component})
    return True


def fit_dml(d: Dataset, cfg: DmlConfig = DmlConfig(),
            oracle: Optional[NuisanceSet] = None) -> DmlFit:
    """Cross-fitted estimate of beta; ``oracle`` skips learning and uses the given nuisances."""
    d = _covariate_dataset(d)
    try:
        _check_classes(d, "response")
    except EstimationError as e:
        raise e.with_stage("dataset") from e
    fold_seed = derive_seed(cfg.seed, 0)
    folds = make_folds(d.n, cfg.k_outer, fold_seed)
    logger.info(f"DML fit: n={d.n}, p={d.p}, K={cfg.k_outer}x{cfg.k_inner}, "
                f"r variant={cfg.r_variant}, oracle={oracle is not None}")

    if oracle is not None:
        results = [FoldNuisance(k, oracle, float("nan")) for k in range(1, folds.k + 1)]
    else:
        results = Parallel(n_jobs=cfg.n_jobs)(
            delayed(_fit_fold)(d, fold, train, cfg) for fold, train, _ in folds.splits())
    nuisances = [res.nuisances for res in results]
    breve = np.array([res.breve_beta for res in results])

    try:
        values = evaluate_nuisances(d, nuisances, folds)
    except EstimationError as e:
        raise e.with_stage("nuisance-evaluation") from e
    init = float(np.median(breve)) if np.all(np.isfinite(breve)) else 0.0
    try:
        try:
            beta_hat = solve_beta(d, values, init=init, tol=cfg.beta_tol)
        except RootFindingError:
            if init == 0.0:
                raise
            logger.warning(f"no sign change around {init:.4g}; retrying with bracket centered at 0")
            beta_hat = solve_beta(d, values, init=0.0, tol=cfg.beta_tol)
        inference = plug_in_inference(d, beta_hat, values, level=cfg.level,
                                      bootstrap_draws=cfg.bootstrap_draws,
                                      seed=derive_seed(cfg.seed, 3))
    except EstimationError as e:
        raise e.with_stage("beta") from e
    residual = float(np.mean(score_vector(d, beta_hat, values)))
    logger.info(f"DML estimate beta={beta_hat:.6g} (se {inference.se:.4g})")
    return DmlFit(
        folds=folds,
        nuisances=nuisances,
        breve_betas=breve,
        beta_hat=float(beta_hat),
        inference=inference,
        r_variant=cfg.r_variant,
        equation_residual=residual,
        fold_seed=fold_seed,
        selected=[res.selected for res in results],
        oracle=oracle is not None,
    )
