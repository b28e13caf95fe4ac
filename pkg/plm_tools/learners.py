"""
Conditional-mean learners used by the cross-fitted pipeline.

A learner is described by a LearnerSpec and fitted by ``fit_learner``; the
returned LearnerModel predicts E[target | covariates]. For the logistic
objective predictions are probabilities clipped to [1e-3, 1 - 1e-3].
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence
import logging
import warnings

import numpy as np
from sklearn.ensemble import (
    GradientBoostingClassifier,
    GradientBoostingRegressor,
    RandomForestClassifier,
    RandomForestRegressor,
)
from sklearn.linear_model import LogisticRegression, LogisticRegressionCV, RidgeCV
from sklearn.model_selection import GridSearchCV, KFold, StratifiedKFold
from sklearn.neighbors import KNeighborsRegressor
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .data import FoldAssignment, derive_seed
from .exceptions import DegenerateSplitWarning, LearnerError

logger = logging.getLogger(__name__)

KINDS = ("boosted-trees", "random-forest", "penalized-linear", "k-nearest")
OBJECTIVES = ("squared", "logistic")
TREE_KINDS = ("boosted-trees", "random-forest")
PROB_CLIP = 1e-3
MIN_ROWS = 10

DEFAULT_HYPERPARAMETERS: Dict[str, Dict[str, Any]] = {
    "boosted-trees": {"max_depth": 3, "learning_rate": 0.1, "n_estimators": 200,
                      "subsample": 1.0, "min_samples_leaf": 1},
    "random-forest": {"n_estimators": 200, "max_features": "sqrt", "bootstrap": True,
                      "max_depth": None, "min_samples_leaf": 5},
    "penalized-linear": {"alphas": (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0), "Cs": 10,
                         "cv_folds": 5},
    "k-nearest": {"k_grid": (5, 10, 20, 40), "cv_folds": 5},
}


@dataclass(frozen=True, eq=False)
class LearnerSpec:
    """Learner kind, hyperparameters, objective, training-matrix dropout and seed.

    Unset hyperparameters take the values in ``DEFAULT_HYPERPARAMETERS``.
    """
    kind: str
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)
    objective: str = "squared"
    dropout_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"learner kind must be one of {KINDS}, got {self.kind!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError(f"dropout_prob must lie in [0, 1), got {self.dropout_prob}")
        if not 0 <= self.seed < 2 ** 32:
            raise ValueError("seed must lie in [0, 2**32)")
        unknown = set(self.hyperparameters) - set(DEFAULT_HYPERPARAMETERS[self.kind])
        if unknown:
            raise ValueError(f"unknown hyperparameters for {self.kind}: {sorted(unknown)}")
        params = {**DEFAULT_HYPERPARAMETERS[self.kind], **dict(self.hyperparameters)}
        _check_ranges(self.kind, params)
        object.__setattr__(self, "hyperparameters", params)

    def with_objective(self, objective: str) -> "LearnerSpec":
        return LearnerSpec(self.kind, self.hyperparameters, objective, self.dropout_prob, self.seed)

    def with_seed(self, seed: int) -> "LearnerSpec":
        return LearnerSpec(self.kind, self.hyperparameters, self.objective, self.dropout_prob, seed)

    def to_dict(self) -> Dict[str, Any]:
        params = {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in self.hyperparameters.items()}
        return {"kind": self.kind, "hyperparameters": params, "objective": self.objective,
                "dropout_prob": self.dropout_prob, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LearnerSpec":
        if isinstance(data, str):
            return cls(data)
        params = {k: (tuple(v) if isinstance(v, list) else v)
                  for k, v in dict(data.get("hyperparameters", {})).items()}
        return cls(kind=data["kind"], hyperparameters=params,
                   objective=data.get("objective", "squared"),
                   dropout_prob=float(data.get("dropout_prob", 0.0)),
                   seed=int(data.get("seed", 0)))

    def equals(self, other: "LearnerSpec") -> bool:
        return self.to_dict() == other.to_dict()


def _check_ranges(kind: str, params: Dict[str, Any]) -> None:
    if kind == "boosted-trees":
        if not 1 <= params["max_depth"] <= 10:
            raise ValueError("boosted-trees max_depth must lie in 1..10")
        if not 0 < params["learning_rate"] <= 1:
            raise ValueError("boosted-trees learning_rate must lie in (0, 1]")
        if params["n_estimators"] < 1 or not 0 < params["subsample"] <= 1:
            raise ValueError("boosted-trees needs n_estimators >= 1 and subsample in (0, 1]")
    elif kind == "random-forest":
        if params["n_estimators"] < 1 or params["min_samples_leaf"] < 1:
            raise ValueError("random-forest needs n_estimators >= 1 and min_samples_leaf >= 1")
    elif kind == "penalized-linear":
        if len(params["alphas"]) < 1 or min(params["alphas"]) <= 0:
            raise ValueError("penalized-linear alphas must be positive")
    elif kind == "k-nearest":
        if len(params["k_grid"]) < 1 or min(params["k_grid"]) < 1:
            raise ValueError("k-nearest k_grid must contain positive integers")
    if "cv_folds" in params and params["cv_folds"] < 2:
        raise ValueError("cv_folds must be at least 2")


@dataclass(frozen=True, eq=False)
class LearnerModel:
    """A fitted learner. ``train_rows`` records the row ids it was trained on."""
    spec: LearnerSpec
    estimator: Any = None
    constant: Optional[float] = None
    train_rows: Optional[np.ndarray] = None

    def predict(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        if c.ndim == 1:
            c = c.reshape(-1, 1)
        if self.constant is not None:
            out = np.full(c.shape[0], self.constant)
        elif self.spec.objective == "logistic" and hasattr(self.estimator, "predict_proba"):
            out = self.estimator.predict_proba(c)[:, 1]
        else:
            out = np.asarray(self.estimator.predict(c), dtype=float)
        if self.spec.objective == "logistic":
            out = np.clip(out, PROB_CLIP, 1.0 - PROB_CLIP)
        return out

    __call__ = predict


def _apply_dropout(c: np.ndarray, spec: LearnerSpec) -> np.ndarray:
    """Copy of ``c`` with each entry replaced by N(0, 1) with probability dropout_prob."""
    out = np.array(c, dtype=float, copy=True)
    if spec.dropout_prob <= 0:
        return out
    rng = np.random.default_rng(derive_seed(spec.seed, 1))
    hit = rng.random(out.shape) < spec.dropout_prob
    out[hit] = rng.standard_normal(int(hit.sum()))
    return out


def _build_estimator(spec: LearnerSpec, n: int, r: np.ndarray):
    hp = spec.hyperparameters
    logistic = spec.objective == "logistic"
    if spec.kind == "boosted-trees":
        cls = GradientBoostingClassifier if logistic else GradientBoostingRegressor
        return cls(max_depth=hp["max_depth"], learning_rate=hp["learning_rate"],
                   n_estimators=hp["n_estimators"], subsample=hp["subsample"],
                   min_samples_leaf=hp["min_samples_leaf"], random_state=spec.seed)
    if spec.kind == "random-forest":
        cls = RandomForestClassifier if logistic else RandomForestRegressor
        return cls(n_estimators=hp["n_estimators"], max_features=hp["max_features"],
                   bootstrap=hp["bootstrap"], max_depth=hp["max_depth"],
                   min_samples_leaf=hp["min_samples_leaf"], random_state=spec.seed)
    if spec.kind == "penalized-linear":
        if not logistic:
            return make_pipeline(StandardScaler(), RidgeCV(alphas=hp["alphas"]))
        minority = int(min(r.sum(), n - r.sum()))
        n_splits = min(hp["cv_folds"], minority)
        if n_splits < 2:
            return make_pipeline(StandardScaler(), LogisticRegression(C=1.0, max_iter=1000))
        cv = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=spec.seed)
        return make_pipeline(StandardScaler(),
                             LogisticRegressionCV(Cs=hp["Cs"], cv=cv, max_iter=1000))
    n_splits = min(hp["cv_folds"], n)
    max_k = n - int(np.ceil(n / n_splits))
    grid = [k for k in hp["k_grid"] if k <= max_k] or [max(1, min(hp["k_grid"][0], max_k))]
    search = GridSearchCV(KNeighborsRegressor(), {"n_neighbors": grid},
                          scoring="neg_mean_squared_error",
                          cv=KFold(n_splits=n_splits, shuffle=True, random_state=spec.seed))
    return make_pipeline(StandardScaler(), search)


def fit_learner(spec: LearnerSpec, c: np.ndarray, r: np.ndarray,
                train_rows: Optional[np.ndarray] = None) -> LearnerModel:
    """Fit ``spec`` to covariates ``c`` and target ``r``; deterministic given ``spec.seed``."""
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        c = c.reshape(-1, 1)
    r = np.asarray(r, dtype=float).reshape(-1)
    n = r.shape[0]
    if c.shape[0] != n:
        raise LearnerError(f"{c.shape[0]} covariate rows for {n} targets", stage=spec.kind)
    if n < MIN_ROWS:
        raise LearnerError(f"learner needs at least {MIN_ROWS} rows, got {n}", stage=spec.kind,
                           info={"rows": n})
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(r))):
        raise LearnerError("non-finite training data", stage=spec.kind)
    if spec.objective == "logistic" and np.any((r != 0) & (r != 1)):
        raise LearnerError("logistic objective requires a binary target", stage=spec.kind)
    rows = None if train_rows is None else np.asarray(train_rows, dtype=np.int64)

    if np.all(r == r[0]):
        return LearnerModel(spec, constant=float(r[0]), train_rows=rows)
    if spec.kind in TREE_KINDS and np.all(np.ptp(c, axis=0) == 0):
        warnings.warn(f"{spec.kind}: all covariates are constant, fitting the mean",
                      DegenerateSplitWarning, stacklevel=2)
        return LearnerModel(spec, constant=float(r.mean()), train_rows=rows)

    estimator = _build_estimator(spec, n, r)
    train_c = _apply_dropout(c, spec)
    try:
        estimator.fit(train_c, r.astype(int) if spec.objective == "logistic" else r)
    except ValueError as e:
        raise LearnerError(f"fit failed: {e}", stage=spec.kind) from e
    logger.debug(f"fitted {spec.kind} ({spec.objective}) on {n} rows")
    return LearnerModel(spec, estimator=estimator, train_rows=rows)


def cv_sse(spec: LearnerSpec, c: np.ndarray, r: np.ndarray, folds: FoldAssignment) -> float:
    """Cross-validated sum of squared prediction errors."""
    c = np.asarray(c, dtype=float)
    r = np.asarray(r, dtype=float).reshape(-1)
    sse = 0.0
    for _, train, test in folds.splits():
        model = fit_learner(spec, c[train], r[train])
        sse += float(np.sum((r[test] - model.predict(c[test])) ** 2))
    return sse


def select_best(specs: Sequence[LearnerSpec], c: np.ndarray, r: np.ndarray,
                folds: FoldAssignment) -> LearnerSpec:
    """The spec with the smallest cross-validated SSE; ties go to the earlier spec."""
    if len(specs) < 2:
        raise ValueError("select_best needs at least two candidate specs")
    losses = [cv_sse(spec, c, r, folds) for spec in specs]
    best = int(np.argmin(losses))
    logger.info(f"selected {specs[best].kind} (CV SSE {losses[best]:.6g}) among "
                f"{[s.kind for s in specs]}")
    return specs[best]
