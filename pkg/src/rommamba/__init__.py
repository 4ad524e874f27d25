"""RoM layers: sparse mixtures of Mamba projection experts on a small numpy autodiff engine."""
from ._accel import backend_name
from .errors import ConfigError, ContractError, NumericalError, ShapeError
from .model import LanguageModel, ModelConfig, build_model, lm_forward
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "LanguageModel",
    "ModelConfig",
    "NumericalError",
    "ShapeError",
    "Tensor",
    "backend_name",
    "build_model",
    "lm_forward",
    "no_grad",
]
