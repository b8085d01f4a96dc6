"""Neural network engine: layers, split models, training."""

from .layers import (
    BatchNorm,
    Conv2D,
    FullyConnected,
    Layer,
    MaxPool2,
    ReLU,
    Softmax,
    conv_as_matrix,
    layer_from_descriptor,
)
from .model import (
    CHECKPOINT_MAGIC,
    clone_layers,
    CHECKPOINT_VERSION,
    SplitModel,
    load_checkpoint,
    mlp_model,
    run_layers,
    save_checkpoint,
    split,
    split_basis,
    table_model,
)
from .train import (
    KEEP_FRACTIONS,
    AdamState,
    TrainConfig,
    TrainResult,
    adam_step,
    cross_entropy,
    decov_penalty,
    gauss_prior_penalty,
    lr_at,
    train,
    train_on_features,
)

__all__ = [
    "AdamState",
    "BatchNorm",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "Conv2D",
    "clone_layers",
    "FullyConnected",
    "KEEP_FRACTIONS",
    "Layer",
    "MaxPool2",
    "ReLU",
    "Softmax",
    "SplitModel",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "conv_as_matrix",
    "cross_entropy",
    "decov_penalty",
    "gauss_prior_penalty",
    "layer_from_descriptor",
    "load_checkpoint",
    "lr_at",
    "mlp_model",
    "run_layers",
    "save_checkpoint",
    "split",
    "split_basis",
    "table_model",
    "train",
    "train_on_features",
]
