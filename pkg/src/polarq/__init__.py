"""Polar-lattice quantization of Gaussian sources and nested-lattice coding."""

__version__ = "0.1.0"

from .errors import (
    DomainError,
    EmptyCosetError,
    HashError,
    InfeasibleRateError,
    PolarqError,
    PreconditionError,
    SizeError,
    TruncationError,
    VersionError,
)
from .gaussian_lattice import (
    DiscreteGaussian,
    PartitionChain,
    RateFloorBound,
    default_chain,
    discrete_gaussian,
    flatness_factor,
    rate_floor_check,
    tune_eta,
)

__all__ = [
    "__version__",
    "PolarqError",
    "DomainError",
    "EmptyCosetError",
    "HashError",
    "InfeasibleRateError",
    "PreconditionError",
    "SizeError",
    "TruncationError",
    "VersionError",
    "PartitionChain",
    "DiscreteGaussian",
    "RateFloorBound",
    "default_chain",
    "discrete_gaussian",
    "flatness_factor",
    "rate_floor_check",
    "tune_eta",
]
