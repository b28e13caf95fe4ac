"""
PLM Tools data model.

Dataset representation, delimited-file ingestion, basis expansion,
prevalence downsampling and fold assignment.
"""

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd

from .exceptions import DataValidationError

logger = logging.getLogger(__name__)

INTERCEPT_NAME = "(intercept)"
SPLINE_DF = 3
MIN_SPLINE_LEVELS = SPLINE_DF + 1


def derive_seed(seed: int, *keys: int) -> int:
    """Stable child seed for the stream identified by ``(seed, *keys)``."""
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return int(state.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Binary response ``y``, exposure ``a`` and covariates ``x`` (n x p).

    Arrays are copied to float64 and frozen on construction. ``row_ids``
    tracks the original row index of every sample across subsetting.
    """
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    has_intercept: bool = False
    x_names: Tuple[str, ...] = ()
    row_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        a = np.array(self.a, dtype=float).reshape(-1)
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        row_ids = (np.arange(y.shape[0]) if self.row_ids is None
                   else np.array(self.row_ids, dtype=np.int64).reshape(-1))
        names = tuple(self.x_names)
        if not names:
            start = 1 if self.has_intercept else 0
            names = ((INTERCEPT_NAME,) if self.has_intercept else ()) + tuple(
                f"x{j + 1 - start}" for j in range(start, x.shape[1]))
        for arr in (y, a, x, row_ids):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "x_names", names)
        validate_dataset(self)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def n_cases(self) -> int:
        return int(self.y.sum())

    @property
    def prevalence(self) -> float:
        return self.n_cases / self.n

    @property
    def covariates(self) -> np.ndarray:
        """Covariate matrix without the intercept column."""
        return self.x[:, 1:] if self.has_intercept else self.x

    def with_intercept(self) -> "Dataset":
        if self.has_intercept:
            return self
        x = np.column_stack([np.ones(self.n), self.x])
        return Dataset(self.y, self.a, x, has_intercept=True,
                       x_names=(INTERCEPT_NAME,) + self.x_names, row_ids=self.row_ids)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.y[idx], self.a[idx], self.x[idx], has_intercept=self.has_intercept,
                       x_names=self.x_names, row_ids=self.row_ids[idx])

    def equals(self, other: "Dataset") -> bool:
        return (self.has_intercept == other.has_intercept
                and self.x_names == other.x_names
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.a, other.a)
                and np.array_equal(self.x, other.x))


def validate_dataset(d: Dataset) -> None:
    """Assert every Dataset invariant; raises DataValidationError."""
    n = d.y.shape[0]
    if d.a.shape[0] != n or d.x.shape[0] != n or d.row_ids.shape[0] != n:
        raise DataValidationError(
            f"length mismatch: y={n}, a={d.a.shape[0]}, x rows={d.x.shape[0]}",
            stage="dataset")
    if d.x.ndim != 2 or d.x.shape[1] < 1:
        raise DataValidationError("covariate matrix must have at least one column",
                                  stage="dataset")
    if len(d.x_names) != d.x.shape[1]:
        raise DataValidationError("x_names does not match the covariate columns",
                                  stage="dataset")
    for name, arr in (("y", d.y), ("a", d.a), ("x", d.x)):
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise DataValidationError(f"non-finite value in {name} at {tuple(int(b) for b in bad)}",
                                      stage="dataset", info={"field": name})
    outside = np.flatnonzero((d.y != 0) & (d.y != 1))
    if outside.size:
        raise DataValidationError(f"response must be 0/1, found {d.y[outside[0]]} at row {outside[0] + 1}",
                                  stage="dataset", info={"row": int(outside[0]) + 1})
    if d.has_intercept and not np.all(d.x[:, 0] == 1.0):
        raise DataValidationError("has_intercept set but column 0 is not identically 1",
                                  stage="dataset")


@dataclass(frozen=True)
class ColumnSchema:
    """Maps file columns to roles. ``x=None`` means every remaining column."""
    y: str
    a: str
    x: Optional[Tuple[str, ...]] = None
    add_intercept: bool = False

    def __post_init__(self):
        if self.x is not None:
            object.__setattr__(self, "x", tuple(self.x))
            if len(self.x) < 1:
                raise ValueError("schema needs at least one covariate column")
        if self.y == self.a:
            raise ValueError("response and exposure must be different columns")


def read_delimited(path: Union[str, Path], schema: ColumnSchema) -> Dataset:
    """Read a comma-separated file with a header row into a Dataset.

    Errors name the offending data row (1-based, header excluded) and column.
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"File not found: {path}", stage="read",
                                  info={"path": str(path)})
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as e:
        raise DataValidationError(f"Inconsistent row lengths in {path}: {e}", stage="read",
                                  info={"path": str(path)}) from e
    except pd.errors.EmptyDataError as e:
        raise DataValidationError(f"Empty file: {path}", stage="read",
                                  info={"path": str(path)}) from e

    frame.columns = [str(c).strip() for c in frame.columns]
    x_cols = (list(schema.x) if schema.x is not None
              else [c for c in frame.columns if c not in (schema.y, schema.a)])
    missing = [c for c in [schema.y, schema.a, *x_cols] if c not in frame.columns]
    if missing:
        raise DataValidationError(f"columns not found in {path.name}: {missing}", stage="read",
                                  info={"columns": missing})
    if not x_cols:
        raise DataValidationError("schema names no covariate columns", stage="read")

    numeric = {}
    for col in [schema.y, schema.a, *x_cols]:
        raw = frame[col]
        short = raw.isna().to_numpy()
        if short.any():
            row = int(np.flatnonzero(short)[0]) + 1
            raise DataValidationError(f"Inconsistent row length: row {row} has no value for column '{col}'",
                                      stage="read", info={"row": row, "column": col})
        stripped = raw.str.strip()
        try:
            values = stripped.astype(float).to_numpy()
        except ValueError:
            # locate the offending cell
            values = pd.to_numeric(stripped, errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(values)
        if bad.any():
            row = int(np.flatnonzero(bad)[0]) + 1
            raise DataValidationError(
                f"Non-numeric cell '{raw.iloc[row - 1]}' at row {row}, column '{col}'",
                stage="read", info={"row": row, "column": col})
        numeric[col] = values

    y = numeric[schema.y]
    outside = np.flatnonzero((y != 0) & (y != 1))
    if outside.size:
        row = int(outside[0]) + 1
        raise DataValidationError(
            f"Response value {y[outside[0]]:g} outside {{0,1}} at row {row}, column '{schema.y}'",
            stage="read", info={"row": row, "column": schema.y})

    x = np.column_stack([numeric[c] for c in x_cols])
    d = Dataset(y, numeric[schema.a], x, x_names=tuple(x_cols))
    logger.info(f"Read {d.n} rows, {d.p} covariates from {path}")
    return d.with_intercept() if schema.add_intercept else d


def write_delimited(d: Dataset, path: Union[str, Path], y_name: str = "y",
                    a_name: str = "a") -> None:
    """Write a Dataset as CSV; the intercept column is not written."""
    names = d.x_names[1:] if d.has_intercept else d.x_names
    frame = pd.DataFrame(d.covariates, columns=list(names))
    frame.insert(0, a_name, d.a)
    frame.insert(0, y_name, d.y.astype(int))
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


def _natural_spline_basis(col: np.ndarray) -> np.ndarray:
    """Natural cubic spline basis with knots at min, 1/3 and 2/3 quantiles, max.

    When quantiles tie, the interior knots sit at the 1/3 and 2/3 quantiles of
    the distinct values instead; these are strictly interior for 4+ levels.

    Truncated-power form: x, then d_k(x) - d_{K-2}(x) for the interior
    differences; linear beyond the boundary knots.
    """
    knots = np.array([col.min(), *np.quantile(col, [1 / 3, 2 / 3]), col.max()])
    if np.any(np.diff(knots) <= 0):
        levels = np.unique(col)
        knots = np.array([levels[0], *np.quantile(levels, [1 / 3, 2 / 3]), levels[-1]])
        logger.debug(f"Tied spline knots; using quantiles of {levels.shape[0]} distinct values")
    n_knots = knots.shape[0]

    def d(k: int) -> np.ndarray:
        num = (np.maximum(col - knots[k], 0.0) ** 3
               - np.maximum(col - knots[-1], 0.0) ** 3)
        return num / (knots[-1] - knots[k])

    basis = np.empty((col.shape[0], n_knots - 1))
    basis[:, 0] = col
    last = d(n_knots - 2)
    for k in range(n_knots - 2):
        basis[:, k + 1] = d(k) - last
    return basis


def basis_expand(x: np.ndarray, continuous_mask: Sequence[bool]) -> np.ndarray:
    """Original columns, then pairwise products, then 3 spline columns per continuous column."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    mask = np.asarray(continuous_mask, dtype=bool).reshape(-1)
    q = x.shape[1]
    if q < 1 or mask.shape[0] != q:
        raise DataValidationError(f"continuous_mask has length {mask.shape[0]}, expected {q}",
                                  stage="basis")
    blocks = [x]
    pairs = list(combinations(range(q), 2))
    if pairs:
        blocks.append(np.column_stack([x[:, i] * x[:, j] for i, j in pairs]))
    for j in np.flatnonzero(mask):
        if np.unique(x[:, j]).shape[0] < MIN_SPLINE_LEVELS:
            raise DataValidationError(
                f"continuous column {j} has fewer than {MIN_SPLINE_LEVELS} distinct values",
                stage="basis", info={"column": int(j)})
        blocks.append(_natural_spline_basis(x[:, j]))
    return np.column_stack(blocks)


def basis_column_names(names: Sequence[str], continuous_mask: Sequence[bool]) -> Tuple[str, ...]:
    names = list(names)
    out = names + [f"{names[i]}*{names[j]}" for i, j in combinations(range(len(names)), 2)]
    for j in np.flatnonzero(np.asarray(continuous_mask, dtype=bool)):
        out += [f"ns({names[j]})_{k + 1}" for k in range(SPLINE_DF)]
    return tuple(out)


def downsample_indices(d: Dataset, target_prevalence: float, seed: int) -> np.ndarray:
    """Sorted row indices keeping all cases and a random subset of controls."""
    if not 0.0 < target_prevalence < 1.0:
        raise ValueError("target_prevalence must lie in (0, 1)")
    cases = np.flatnonzero(d.y == 1)
    controls = np.flatnonzero(d.y == 0)
    if d.prevalence >= target_prevalence:
        raise DataValidationError(
            f"target prevalence {target_prevalence} unreachable: current prevalence "
            f"{d.prevalence:.4f} would require dropping cases", stage="downsample")
    n_keep = min(int(round(cases.shape[0] * (1.0 - target_prevalence) / target_prevalence)),
                 controls.shape[0])
    rng = np.random.default_rng(seed)
    kept = rng.choice(controls, size=n_keep, replace=False)
    logger.info(f"Downsampling controls {controls.shape[0]} -> {n_keep} "
                f"(prevalence {d.prevalence:.4f} -> {target_prevalence})")
    return np.sort(np.concatenate([cases, kept]))


def downsample_controls(d: Dataset, target_prevalence: float, seed: int) -> Dataset:
    return d.subset(downsample_indices(d, target_prevalence, seed))


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold index in ``1..k`` for every sample."""
    fold_of: np.ndarray
    k: int
    seed: Optional[int] = field(default=None)

    def __post_init__(self):
        fold_of = np.array(self.fold_of, dtype=np.int64).reshape(-1)
        fold_of.setflags(write=False)
        object.__setattr__(self, "fold_of", fold_of)
        if fold_of.size and (fold_of.min() < 1 or fold_of.max() > self.k):
            raise ValueError("fold indices must lie in 1..k")

    @property
    def n(self) -> int:
        return int(self.fold_of.shape[0])

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k + 1)[1:]

    def splits(self) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
        for fold in range(1, self.k + 1):
            yield fold, self.train_indices(fold), self.test_indices(fold)

    def equals(self, other: "FoldAssignment") -> bool:
        return self.k == other.k and np.array_equal(self.fold_of, other.fold_of)


def make_folds(n: int, k: int, seed: int) -> FoldAssignment:
    """Uniformly random balanced partition of ``n`` samples into ``k`` folds."""
    if k < 2:
        raise ValueError(f"fold count must be at least 2, got {k}")
    if k > n:
        raise DataValidationError(f"fold count {k} exceeds sample count {n}", stage="folds")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % k + 1
    return FoldAssignment(fold_of, k, seed)
