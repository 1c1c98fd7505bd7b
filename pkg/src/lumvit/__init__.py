"""LUM-ViT: learnable under-sampling masks for DMD pre-acquisition
modulation, with a simulated DMD, a from-scratch autodiff engine and the
baselines it is compared against."""

__version__ = "0.1.0"

from .dmd import BACKEND  # noqa: E402
from .errors import (DegenerateError, DimensionError, FormatError, LumVitError,  # noqa: E402
                     NumericError, OracleError, PipelineError, UsageError, ValidationError)

__all__ = [
    "BACKEND", "DegenerateError", "DimensionError", "FormatError", "LumVitError", "NumericError",
    "OracleError", "PipelineError", "UsageError", "ValidationError", "__version__",
]
