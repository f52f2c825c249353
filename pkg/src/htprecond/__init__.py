"""Hierarchical factorized approximate-inverse preconditioners for PCG on
variable-coefficient pressure-Poisson systems."""

from .estimators import (
    HierarchicalPreconditioner,
    IC0Preconditioner,
    JacobiPreconditioner,
    make_preconditioner,
)
from .factors import FactorTensor, apply, assemble_dense, init_factors
from .partition import HPartition, build_partition, packed_width
from .pcg import SolveConfig, SolveReport, pcg_solve
from .training import TrainConfig, train_factors
from .validation import ConfigError, ContractError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "HierarchicalPreconditioner", "IC0Preconditioner", "JacobiPreconditioner",
    "make_preconditioner", "FactorTensor", "apply", "assemble_dense", "init_factors",
    "HPartition", "build_partition", "packed_width", "SolveConfig", "SolveReport",
    "pcg_solve", "TrainConfig", "train_factors", "ConfigError", "ContractError",
    "NumericalError",
]
