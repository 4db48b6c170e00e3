"""Hypergraph-convolution actor-critic (HGAC / ATT-HGAC) for cooperative particle worlds."""

from .errors import ConfigError, ContractViolation, NumericError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "ContractViolation", "NumericError", "__version__"]
