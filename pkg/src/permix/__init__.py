"""Simulation toolkit for mixtures of two randomly permuted Markov chains."""

from permix.core import (
    BudgetError,
    Environment,
    LiftedKernel,
    MixingTable,
    MixtureSpec,
    ProjectedKernel,
    StochasticMatrix,
    ValidationError,
    build_lifted_kernel,
    project_kernel,
    sample_environment,
    validate_hypotheses,
)

__all__ = [
    "BudgetError",
    "Environment",
    "LiftedKernel",
    "MixingTable",
    "MixtureSpec",
    "ProjectedKernel",
    "StochasticMatrix",
    "ValidationError",
    "build_lifted_kernel",
    "project_kernel",
    "sample_environment",
    "validate_hypotheses",
]
