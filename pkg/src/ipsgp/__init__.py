"""Gaussian-process learning of interaction kernels in particle systems."""

from .errors import (
    ContractError,
    IngestionError,
    IntegrationError,
    InvalidInputError,
    IpsgpError,
    NumericalError,
    OptimizationError,
    ResourceError,
)
from .kernels import KernelHyperparams
from .observations import ObservationSet

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "IngestionError",
    "IntegrationError",
    "InvalidInputError",
    "IpsgpError",
    "KernelHyperparams",
    "NumericalError",
    "ObservationSet",
    "OptimizationError",
    "ResourceError",
]
