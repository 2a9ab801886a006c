"""Compositional prototype explanations on top of small B-cos networks."""

from comix.bcos import (
    BcosLayer,
    BcosNetwork,
    DynamicLinearMap,
    InputEncodingSpec,
    TrainConfig,
    bcos_unit,
    collapse,
    layer_effective_matrix,
    load_model,
    network_forward,
    save_model,
    train,
)
from comix.errors import ComixError, ContractError, FormatError, HashMismatchError

__version__ = "0.1.0"

__all__ = [
    "BcosLayer",
    "BcosNetwork",
    "ComixError",
    "ContractError",
    "DynamicLinearMap",
    "FormatError",
    "HashMismatchError",
    "InputEncodingSpec",
    "TrainConfig",
    "bcos_unit",
    "collapse",
    "layer_effective_matrix",
    "load_model",
    "network_forward",
    "save_model",
    "train",
]
