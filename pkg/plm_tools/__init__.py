"""PLM Tools - Inference for the exposure log odds ratio in a logistic partially linear model."""

__version__ = "0.1.0"

from .data import (
    ColumnSchema,
    Dataset,
    FoldAssignment,
    basis_expand,
    derive_seed,
    downsample_controls,
    make_folds,
    read_delimited,
    write_delimited,
)
from .dml import DmlConfig, DmlFit, check_sample_splitting, fit_dml
from .exceptions import (
    DataValidationError,
    DegenerateInferenceError,
    EstimationError,
    LearnerError,
    RootFindingError,
    SimulationError,
    SolverError,
)
from .hd import HdConfig, HdFit, fit_hd
from .learners import LearnerSpec, fit_learner, select_best
from .score import InferenceResult, NuisanceSet, plug_in_inference, solve_beta
from .simgen import GeneratorSpec, SimReport, generate, run_replicates

__all__ = [
    'ColumnSchema',
    'Dataset',
    'FoldAssignment',
    'basis_expand',
    'derive_seed',
    'downsample_controls',
    'make_folds',
    'read_delimited',
    'write_delimited',
    'DmlConfig',
    'DmlFit',
    'check_sample_splitting',
    'fit_dml',
    'DataValidationError',
    'DegenerateInferenceError',
    'EstimationError',
    'LearnerError',
    'RootFindingError',
    'SimulationError',
    'SolverError',
    'HdConfig',
    'HdFit',
    'fit_hd',
    'LearnerSpec',
    'fit_learner',
    'select_best',
    'InferenceResult',
    'NuisanceSet',
    'plug_in_inference',
    'solve_beta',
    'GeneratorSpec',
    'SimReport',
    'generate',
    'run_replicates',
]
