"""Autoencoder architectures.

The dense autoencoder narrows through 64-128-256-256-128-64 on both
sides with dropout after each activated encoder layer. The
convolutional one halves the spatial size four times through channel
widths 8-16-32-64 (filter 4, stride 2, padding 1), bottlenecks through
a dense layer, and mirrors back with three stride-2 transposed
convolutions followed by a stride-1 filter-3 convolution that lands
exactly on the input raster.
"""
from __future__ import annotations

from .layers import LayerSpec, NetworkParams, conv_output_size, init_weights

__all__ = ["build_ff_autoencoder", "build_conv_autoencoder"]

FF_WIDTHS = (64, 128, 256, 256, 128, 64)
# Activation flags per dense stage; the last two stages of both the
# encoder and the decoder stay linear.
FF_ACTIVE = (True, True, True, True, True, False, False)

CONV_CHANNELS = (8, 16, 32, 64)
CONV_FILTER = 4
FINAL_FILTER = 3


def build_ff_autoencoder(n_input: int, k: int, keep_prob: float = 0.9,
                         seed: int = 0) -> NetworkParams:
    """Dense autoencoder with mirrored widths and a size-k bottleneck."""
    if not 1 <= k <= n_input:
        raise ValueError("bottleneck must satisfy 1 <= k <= n_input")
    enc_widths = (n_input,) + FF_WIDTHS + (k,)
    dec_widths = (k,) + FF_WIDTHS + (n_input,)
    layers: list[LayerSpec] = []
    for i in range(len(enc_widths) - 1):
        layers.append(LayerSpec(kind="dense", in_size=enc_widths[i],
                                out_size=enc_widths[i + 1]))
        if FF_ACTIVE[i]:
            layers.append(LayerSpec(kind="activation", activation="elu"))
            layers.append(LayerSpec(kind="dropout", keep_prob=keep_prob))
    bottleneck = len(layers)
    for i in range(len(dec_widths) - 1):
        layers.append(LayerSpec(kind="dense", in_size=dec_widths[i],
                                out_size=dec_widths[i + 1]))
        if FF_ACTIVE[i]:
            layers.append(LayerSpec(kind="activation", activation="elu"))
    layers = tuple(layers)
    return NetworkParams(
        layers=layers,
        weights=init_weights(layers, seed),
        rng_seed=seed,
        input_shape=(n_input,),
        bottleneck_index=bottleneck,
    )


def build_conv_autoencoder(height: int, width: int, k: int,
                           seed: int = 0) -> NetworkParams:
    """Convolutional autoencoder on 1-channel (height x width) rasters.

    The four stride-2 encoder stages require both extents to be
    divisible by 16; the decoder unflattens at an eighth of the input
    resolution. The bottleneck layer is linear so the latent code can
    match sign-indefinite reduced coordinates.
    """
    if height % 16 or width % 16:
        raise ValueError("convolutional autoencoder needs height, width % 16 == 0")
    if k < 1:
        raise ValueError("bottleneck must be positive")
    layers: list[LayerSpec] = []
    channels = (1,) + CONV_CHANNELS
    h, w = height, width
    for i in range(4):
        layers.append(LayerSpec(kind="conv", in_channels=channels[i],
                                out_channels=channels[i + 1],
                                filter_size=CONV_FILTER, stride=2, padding=1,
                                height=h, width=w))
        layers.append(LayerSpec(kind="activation", activation="elu"))
        h = conv_output_size(h, CONV_FILTER, 2, 1)
        w = conv_output_size(w, CONV_FILTER, 2, 1)
    flat = channels[-1] * h * w
    layers.append(LayerSpec(kind="flatten"))
    layers.append(LayerSpec(kind="dense", in_size=flat, out_size=k))
    bottleneck = len(layers)

    uh, uw = height // 8, width // 8
    unflat = channels[-1] * uh * uw
    layers.append(LayerSpec(kind="dense", in_size=k, out_size=256))
    layers.append(LayerSpec(kind="activation", activation="elu"))
    layers.append(LayerSpec(kind="dense", in_size=256, out_size=unflat))
    layers.append(LayerSpec(kind="activation", activation="elu"))
    layers.append(LayerSpec(kind="unflatten", out_channels=channels[-1],
                            height=uh, width=uw))
    dec_channels = (64, 32, 16, 8)
    h, w = uh, uw
    for i in range(3):
        layers.append(LayerSpec(kind="conv_transpose", in_channels=dec_channels[i],
                                out_channels=dec_channels[i + 1],
                                filter_size=CONV_FILTER, stride=2, padding=1,
                                height=h, width=w))
        layers.append(LayerSpec(kind="activation", activation="elu"))
        h, w = 2 * h, 2 * w
    layers.append(LayerSpec(kind="conv", in_channels=dec_channels[-1], out_channels=1,
                            filter_size=FINAL_FILTER, stride=1, padding=1,
                            height=h, width=w))
    layers = tuple(layers)
    return NetworkParams(
        layers=layers,
        weights=init_weights(layers, seed),
        rng_seed=seed,
        input_shape=(1, height, width),
        bottleneck_index=bottleneck,
    )
