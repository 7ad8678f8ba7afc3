"""Topology-aware dynamic Gaussian splatting on a desk-scale CPU budget."""
from .core import (BehindCameraError, ConfigError, DivergenceError, FormatError, InitializationError,
                   InvalidInputError, StageOrderError, TopoGSError)

__version__ = "0.1.0"

__all__ = ["TopoGSError", "InvalidInputError", "ConfigError", "FormatError", "StageOrderError", "DivergenceError",
           "InitializationError", "BehindCameraError", "__version__"]
