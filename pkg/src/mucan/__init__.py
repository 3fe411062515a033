"""Multi-correspondence aggregation operators for 4x video super-resolution."""
from .exceptions import (ConfigError, ContractError, MucanError, RetryWithNewSeed,
                         ShapeError, TrainingError)
from .network import MucanConfig, forward, init_weights, predict, train, train_toy
from .tensor_core import WeightStore

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "MucanError", "RetryWithNewSeed", "ShapeError", "TrainingError",
    "MucanConfig", "WeightStore", "forward", "init_weights", "predict", "train", "train_toy",
    "MuCANSuperResolver",
]


def __getattr__(name):
    # keeps scikit-learn off the import path unless the wrapper is used
    if name == "MuCANSuperResolver":
        from .estimator import MuCANSuperResolver
        return MuCANSuperResolver
    raise AttributeError(name)
