"""Doeblin minorization toolkit for inhomogeneous and random-environment Markov chains."""

from .errors import DoeblinError
from .kernel import (
    MinorizationCertificate,
    StochasticKernel,
    compose,
    doeblin_extract,
    minimal_doeblin_lag,
    stationary_distribution,
    tv_distance,
    validate_kernel,
)
from .sequential import ChainSpec, limit_measure, one_step_bound, one_step_ledger
from .decomposition import Observable, decompose, exact_variance, variance_classification

__version__ = "0.1.0"

__all__ = [
    "ChainSpec",
    "DoeblinError",
    "MinorizationCertificate",
    "Observable",
    "StochasticKernel",
    "compose",
    "decompose",
    "doeblin_extract",
    "exact_variance",
    "limit_measure",
    "minimal_doeblin_lag",
    "one_step_bound",
    "one_step_ledger",
    "stationary_distribution",
    "tv_distance",
    "validate_kernel",
    "variance_classification",
]
