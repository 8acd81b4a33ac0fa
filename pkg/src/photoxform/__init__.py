"""Jointly learned lighting patterns and per-pixel photometric features for multi-view matching."""

from .errors import (ConfigurationError, ContractError, DivergenceError, DomainError, ExportError,
                     FormatError, GeometryError, PhotoxformError, SamplingError)
from .lightstage import LayoutConfig, LightstageLayout, ViewSpec, build_layout, encode_view
from .model import FeatureNet, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_full

__all__ = [
    "ConfigurationError", "ContractError", "DivergenceError", "DomainError", "ExportError",
    "FormatError", "GeometryError", "PhotoxformError", "SamplingError",
    "LayoutConfig", "LightstageLayout", "ViewSpec", "build_layout", "encode_view",
    "FeatureNet", "ModelConfig", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "train_full",
]
