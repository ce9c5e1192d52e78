"""Variational recurrent sequence models on a small reverse-mode autodiff core."""

from .errors import ContractError, DimensionError, DomainError, FormatError, NumericError, VrnnError
from .models import ModelConfig, generate, latent_trace, new_model
from .optim import TrainConfig, fit

__all__ = [
    "ContractError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "ModelConfig",
    "NumericError",
    "TrainConfig",
    "VrnnError",
    "fit",
    "generate",
    "latent_trace",
    "new_model",
]
__version__ = "0.1.0"
