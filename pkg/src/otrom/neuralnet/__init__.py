"""Dense and convolutional autoencoders with manual backpropagation."""

from otrom.neuralnet.builders import build_conv_autoencoder, build_ff_autoencoder
from otrom.neuralnet.layers import (
    LayerSpec,
    NetworkParams,
    backward,
    conv_output_size,
    conv_transpose_output_size,
    forward,
    forward_with_latent,
    init_weights,
    parameter_count,
)
from otrom.neuralnet.losses import mse_loss, sinkhorn_batch_loss
from otrom.neuralnet.training import (
    EpochRecord,
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    train_autoencoder,
    train_decoder,
)

__all__ = [
    "LayerSpec",
    "NetworkParams",
    "backward",
    "build_conv_autoencoder",
    "build_ff_autoencoder",
    "conv_output_size",
    "conv_transpose_output_size",
    "forward",
    "forward_with_latent",
    "init_weights",
    "mse_loss",
    "parameter_count",
    "sinkhorn_batch_loss",
    "EpochRecord",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "train_autoencoder",
    "train_decoder",
]
