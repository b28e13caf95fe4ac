"""Exception and warning types raised by the estimation library."""

from typing import Any, Dict, Optional


class EstimationError(Exception):
    """Base error of the library.

    Carries the pipeline ``stage`` that failed and an ``info`` mapping with
    machine-readable context (row/column, iteration, fold, ...).
    """

    def __init__(self, message: str, stage: Optional[str] = None,
                 info: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage
        self.info: Dict[str, Any] = dict(info or {})

    def with_stage(self, stage: str) -> "EstimationError":
        """Return the same error labeled with an (outer) stage."""
        label = stage if self.stage is None else f"{stage} / {self.stage}"
        return type(self)(self.message, stage=label, info=self.info)

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class DataValidationError(EstimationError, ValueError):
    """Input data violates a Dataset invariant or a precondition."""


class SolverError(EstimationError):
    """Penalized solver hit a non-finite objective or did not converge."""


class RootFindingError(EstimationError):
    """No sign change found for a scalar estimating equation."""


class DegenerateInferenceError(EstimationError):
    """Plug-in inference is not identified (slope Ī numerically zero)."""


class LearnerError(EstimationError):
    """A conditional-mean learner could not be fitted or evaluated."""


class SimulationError(EstimationError):
    """Too many Monte Carlo replicates failed."""


class DegenerateFoldWarning(UserWarning):
    """A cross-validation fold was skipped."""


class ExponentGuardWarning(UserWarning):
    """An exponent was capped to avoid overflow."""


class DegenerateSplitWarning(UserWarning):
    """A tree learner had nothing to split on."""
