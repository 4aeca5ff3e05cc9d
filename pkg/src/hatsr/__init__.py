"""Hybrid attention transformer for single-image super-resolution, built on a
small numpy reverse-mode autodiff core."""
from .errors import ConfigError, DimensionError, FormatError, HatError, NonFiniteError, UsageError
from .model import HAT, ModelConfig, ParamTree, hat_forward
from .tensor import Tape, Tensor, backward, grad_check, no_record, precision

__all__ = [
    "HAT", "ModelConfig", "ParamTree", "hat_forward",
    "Tensor", "Tape", "backward", "grad_check", "no_record", "precision",
    "HatError", "ConfigError", "DimensionError", "FormatError", "NonFiniteError", "UsageError",
]
__version__ = "0.1.0"
