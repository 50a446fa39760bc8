"""Spatial-frequency dual-domain attention U-Net for image segmentation,
built on a self-contained numpy tensor core with reverse-mode autodiff."""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericError,
    SfunetError,
    ShapeError,
    TapeError,
)
from .network import ModelConfig, SFUNet, load, save
from .tensor import ComplexTensor4, GradTape, Parameter, ParameterRegistry, RealTensor4
from .training import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ComplexTensor4",
    "ConfigError",
    "DataError",
    "GradTape",
    "ModelConfig",
    "NumericError",
    "Parameter",
    "ParameterRegistry",
    "RealTensor4",
    "SFUNet",
    "SfunetError",
    "ShapeError",
    "TapeError",
    "TrainConfig",
    "load",
    "save",
    "train_loop",
    "__version__",
]
