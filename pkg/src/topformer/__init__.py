"""TopFormer inference engine, cost analyzer and gradient-check harness."""
from .config import MBBlockCfg, VariantConfig, micro_config, variant
from .errors import (BindError, ConfigError, FormatError, GradcheckError, InputError,
                     InvariantError, ShapeError, StateError)
from .iofmt import WeightStore, load_weights, random_init, save_weights
from .model import Model, bind, build, fold, forward
from .tensor import BatchNormParams, ConvSpec, Tensor

__all__ = [
    "BatchNormParams", "BindError", "ConfigError", "ConvSpec", "FormatError", "GradcheckError",
    "InputError", "InvariantError", "MBBlockCfg", "Model", "ShapeError", "StateError", "Tensor",
    "VariantConfig", "WeightStore", "bind", "build", "fold", "forward", "load_weights",
    "micro_config", "random_init", "save_weights", "variant",
]
