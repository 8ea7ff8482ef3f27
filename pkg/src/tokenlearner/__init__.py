"""TokenLearner / TokenFuser modules on a small numpy autodiff core."""

from .config import ModelConfig, vit_config
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, NumericError
from .model import Model, build_model, forward, plan, token_trace
from .tensor import Tape, Tensor, grad

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "Model",
    "ModelConfig",
    "NumericError",
    "Tape",
    "Tensor",
    "build_model",
    "forward",
    "grad",
    "plan",
    "token_trace",
    "vit_config",
]
