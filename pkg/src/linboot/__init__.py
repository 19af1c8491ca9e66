"""Cluster-stability assessment for variational DP mixtures via the linear bootstrap."""

import jax

# Sensitivity solves and 1e-8 gradient tolerances need double precision.
jax.config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    ArchiveError,
    DataError,
    DegenerateClusteringError,
    InsufficientSupportError,
    NotStrictMinimumError,
    NumericalError,
)
from .model import Dataset, GlobalParams, LocalParams, Priors  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "ArchiveError",
    "DataError",
    "Dataset",
    "DegenerateClusteringError",
    "GlobalParams",
    "InsufficientSupportError",
    "LocalParams",
    "NotStrictMinimumError",
    "NumericalError",
    "Priors",
]
