"""Token-relationship-graph knowledge distillation on a small numpy autodiff core."""

from .config import DistillConfig, RunConfig
from .errors import ConfigError, DataParseError, DimensionError, NumericError, TRGError, UsageError
from .tensor import Tensor, backward, grad_check

__all__ = [
    "ConfigError", "DataParseError", "DimensionError", "DistillConfig", "NumericError", "RunConfig",
    "TRGError", "Tensor", "UsageError", "backward", "grad_check",
]
__version__ = "0.1.0"
