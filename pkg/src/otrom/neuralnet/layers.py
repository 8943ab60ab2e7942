"""Network layers with hand-written forward and backward passes.

Convolutions go through an im2col expansion so the forward, the weight
gradient, and the input gradient are all plain matrix products; the
transposed convolution is implemented as the exact adjoint of the
corresponding convolution, which the inner-product tests rely on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LayerSpec",
    "NetworkParams",
    "conv_output_size",
    "conv_transpose_output_size",
    "init_weights",
    "forward",
    "backward",
    "parameter_count",
]

LAYER_KINDS = (
    "dense", "conv", "conv_transpose", "flatten", "unflatten", "activation",
    "dropout",
)


def conv_output_size(size: int, filter_size: int, stride: int, padding: int) -> int:
    num = size - filter_size + 2 * padding
    if num % stride != 0:
        raise ValueError(
            f"conv dimensions do not compose: ({size} - {filter_size} + "
            f"2*{padding}) is not divisible by stride {stride}"
        )
    out = num // stride + 1
    if out < 1:
        raise ValueError("conv output size must be positive")
    return out


def conv_transpose_output_size(size: int, filter_size: int, stride: int,
                               padding: int) -> int:
    out = stride * (size - 1) + filter_size - 2 * padding
    if out < 1:
        raise ValueError("transposed conv output size must be positive")
    return out


@dataclass(frozen=True)
class LayerSpec:
    """Shape parameters for one layer; unused fields stay None."""

    kind: str
    in_size: int | None = None
    out_size: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    filter_size: int | None = None
    stride: int = 1
    padding: int = 0
    height: int | None = None
    width: int | None = None
    keep_prob: float | None = None
    activation: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (not self.in_size or not self.out_size):
            raise ValueError("dense layers need in_size and out_size")
        if self.kind == "conv":
            conv_output_size(self.height, self.filter_size, self.stride, self.padding)
            conv_output_size(self.width, self.filter_size, self.stride, self.padding)
        if self.kind == "conv_transpose":
            conv_transpose_output_size(self.height, self.filter_size, self.stride,
                                       self.padding)
        if self.kind == "dropout" and not (self.keep_prob and 0.0 < self.keep_prob <= 1.0):
            raise ValueError("dropout needs keep_prob in (0, 1]")
        if self.kind == "activation" and self.activation not in ("elu",):
            raise ValueError(f"unsupported activation {self.activation!r}")

    def output_hw(self) -> tuple[int, int]:
        if self.kind == "conv":
            return (
                conv_output_size(self.height, self.filter_size, self.stride, self.padding),
                conv_output_size(self.width, self.filter_size, self.stride, self.padding),
            )
        if self.kind == "conv_transpose":
            return (
                conv_transpose_output_size(self.height, self.filter_size, self.stride,
                                           self.padding),
                conv_transpose_output_size(self.width, self.filter_size, self.stride,
                                           self.padding),
            )
        raise ValueError(f"{self.kind} has no spatial output")


@dataclass(frozen=True)
class NetworkParams:
    """Layer stack plus one weight tuple per layer (empty when weightless).

    ``bottleneck_index`` marks the first decoder layer of an autoencoder;
    the latent code is the input flowing into that layer.
    """

    layers: tuple[LayerSpec, ...]
    weights: tuple[tuple[np.ndarray, ...], ...]
    rng_seed: int
    input_shape: tuple[int, ...]
    bottleneck_index: int | None = None

    def __post_init__(self):
        if len(self.layers) != len(self.weights):
            raise ValueError("one weight tuple per layer is required")
        for lw in self.weights:
            for a in lw:
                if not np.all(np.isfinite(a)):
                    raise ValueError("network weights must be finite")
                a.setflags(write=False)

    def mutable_weights(self) -> list[list[np.ndarray]]:
        return [[a.copy() for a in lw] for lw in self.weights]

    def with_weights(self, weights) -> "NetworkParams":
        frozen = tuple(tuple(np.ascontiguousarray(a) for a in lw) for lw in weights)
        return NetworkParams(
            layers=self.layers,
            weights=frozen,
            rng_seed=self.rng_seed,
            input_shape=self.input_shape,
            bottleneck_index=self.bottleneck_index,
        )

    def decoder(self) -> "NetworkParams":
        """The decoder half as a standalone network taking latent input."""
        if self.bottleneck_index is None:
            raise ValueError("network has no recorded bottleneck")
        i = self.bottleneck_index
        first = self.layers[i]
        if first.kind != "dense":
            raise ValueError("decoder must start with a dense layer")
        return NetworkParams(
            layers=self.layers[i:],
            weights=self.weights[i:],
            rng_seed=self.rng_seed,
            input_shape=(first.in_size,),
            bottleneck_index=None,
        )


def parameter_count(net: NetworkParams) -> int:
    return int(sum(a.size for lw in net.weights for a in lw))


def init_weights(layers: tuple[LayerSpec, ...], seed: int):
    """He-uniform initialization, biases zero, drawn from one seeded stream."""
    rng = np.random.default_rng(seed)
    weights = []
    for spec in layers:
        if spec.kind == "dense":
            lim = np.sqrt(6.0 / spec.in_size)
            W = rng.uniform(-lim, lim, size=(spec.out_size, spec.in_size))
            weights.append((W, np.zeros(spec.out_size)))
        elif spec.kind == "conv":
            fan_in = spec.in_channels * spec.filter_size ** 2
            lim = np.sqrt(6.0 / fan_in)
            K = rng.uniform(-lim, lim, size=(spec.out_channels, spec.in_channels,
                                             spec.filter_size, spec.filter_size))
            weights.append((K, np.zeros(spec.out_channels)))
        elif spec.kind == "conv_transpose":
            fan_in = spec.in_channels * spec.filter_size ** 2
            lim = np.sqrt(6.0 / fan_in)
            K = rng.uniform(-lim, lim, size=(spec.in_channels, spec.out_channels,
                                             spec.filter_size, spec.filter_size))
            weights.append((K, np.zeros(spec.out_channels)))
        else:
            weights.append(())
    return tuple(tuple(a for a in lw) for lw in weights)


# ---------------------------------------------------------------------------
# im2col plumbing
# ---------------------------------------------------------------------------


def _im2col(X, F, S, P, OH, OW):
    B, C, H, W = X.shape
    Xp = np.pad(X, ((0, 0), (0, 0), (P, P), (P, P))) if P else X
    cols = np.empty((B, C, F, F, OH, OW), dtype=X.dtype)
    for fy in range(F):
        for fx in range(F):
            cols[:, :, fy, fx] = Xp[:, :, fy:fy + S * OH:S, fx:fx + S * OW:S]
    return cols.reshape(B, C * F * F, OH * OW)


def _col2im(cols, B, C, H, W, F, S, P, OH, OW):
    cols = cols.reshape(B, C, F, F, OH, OW)
    Xp = np.zeros((B, C, H + 2 * P, W + 2 * P), dtype=cols.dtype)
    for fy in range(F):
        for fx in range(F):
            Xp[:, :, fy:fy + S * OH:S, fx:fx + S * OW:S] += cols[:, :, fy, fx]
    return Xp[:, :, P:P + H, P:P + W] if P else Xp


# ---------------------------------------------------------------------------
# per-layer forward / backward
# ---------------------------------------------------------------------------


def _dense_fwd(spec, w, X, train_mode, rng):
    W, b = w
    return X @ W.T + b, (X,)


def _dense_bwd(spec, w, cache, dY):
    (X,) = cache
    W, _ = w
    return dY @ W, [dY.T @ X, dY.sum(axis=0)]


def _conv_fwd(spec, w, X, train_mode, rng):
    K, b = w
    OH, OW = spec.output_hw()
    cols = _im2col(X, spec.filter_size, spec.stride, spec.padding, OH, OW)
    Kmat = K.reshape(spec.out_channels, -1)
    Y = np.einsum("of,bfl->bol", Kmat, cols, optimize=True)
    Y = Y.reshape(X.shape[0], spec.out_channels, OH, OW) + b[None, :, None, None]
    return Y, (cols, X.shape)


def _conv_bwd(spec, w, cache, dY):
    K, _ = w
    cols, x_shape = cache
    B, C, H, W = x_shape
    OH, OW = spec.output_hw()
    dYmat = dY.reshape(B, spec.out_channels, OH * OW)
    Kmat = K.reshape(spec.out_channels, -1)
    dK = np.einsum("bol,bfl->of", dYmat, cols, optimize=True).reshape(K.shape)
    db = dY.sum(axis=(0, 2, 3))
    dcols = np.einsum("of,bol->bfl", Kmat, dYmat, optimize=True)
    dX = _col2im(dcols, B, C, H, W, spec.filter_size, spec.stride, spec.padding,
                 OH, OW)
    return dX, [dK, db]


def _conv_transpose_fwd(spec, w, X, train_mode, rng):
    # Kernel (C_in, C_out, F, F) acts as the adjoint of a convolution that
    # maps C_out-channel images to C_in-channel ones.
    K, b = w
    B = X.shape[0]
    h, wd = X.shape[2], X.shape[3]
    OH, OW = spec.output_hw()
    Kmat = K.reshape(spec.in_channels, -1)
    Xmat = X.reshape(B, spec.in_channels, h * wd)
    cols = np.einsum("if,bil->bfl", Kmat, Xmat, optimize=True)
    Y = _col2im(cols, B, spec.out_channels, OH, OW, spec.filter_size, spec.stride,
                spec.padding, h, wd)
    return Y + b[None, :, None, None], (X,)


def _conv_transpose_bwd(spec, w, cache, dY):
    K, _ = w
    (X,) = cache
    B = X.shape[0]
    h, wd = X.shape[2], X.shape[3]
    OH, OW = dY.shape[2], dY.shape[3]
    cols = _im2col(dY, spec.filter_size, spec.stride, spec.padding, h, wd)
    Kmat = K.reshape(spec.in_channels, -1)
    dX = np.einsum("if,bfl->bil", Kmat, cols, optimize=True)
    dX = dX.reshape(X.shape)
    Xmat = X.reshape(B, spec.in_channels, h * wd)
    dK = np.einsum("bil,bfl->if", Xmat, cols, optimize=True).reshape(K.shape)
    db = dY.sum(axis=(0, 2, 3))
    return dX, [dK, db]


def _flatten_fwd(spec, w, X, train_mode, rng):
    return X.reshape(X.shape[0], -1), (X.shape,)


def _flatten_bwd(spec, w, cache, dY):
    (shape,) = cache
    return dY.reshape(shape), []


def _unflatten_fwd(spec, w, X, train_mode, rng):
    return X.reshape(X.shape[0], spec.out_channels, spec.height, spec.width), None


def _unflatten_bwd(spec, w, cache, dY):
    return dY.reshape(dY.shape[0], -1), []


def _activation_fwd(spec, w, X, train_mode, rng):
    Y = np.where(X > 0.0, X, np.expm1(np.minimum(X, 0.0)))
    return Y, (Y,)


def _activation_bwd(spec, w, cache, dY):
    (Y,) = cache
    return dY * np.where(Y > 0.0, 1.0, Y + 1.0), []


def _dropout_fwd(spec, w, X, train_mode, rng):
    if not train_mode or spec.keep_prob >= 1.0:
        return X, None
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(X.shape) < spec.keep_prob) / spec.keep_prob
    return X * mask, (mask,)


def _dropout_bwd(spec, w, cache, dY):
    if cache is None:
        return dY, []
    (mask,) = cache
    return dY * mask, []


_FWD = {
    "dense": _dense_fwd,
    "conv": _conv_fwd,
    "conv_transpose": _conv_transpose_fwd,
    "flatten": _flatten_fwd,
    "unflatten": _unflatten_fwd,
    "activation": _activation_fwd,
    "dropout": _dropout_fwd,
}

_BWD = {
    "dense": _dense_bwd,
    "conv": _conv_bwd,
    "conv_transpose": _conv_transpose_bwd,
    "flatten": _flatten_bwd,
    "unflatten": _unflatten_bwd,
    "activation": _activation_bwd,
    "dropout": _dropout_bwd,
}


def forward(net: NetworkParams, X: np.ndarray, train_mode: bool = False,
            rng: np.random.Generator | None = None, weights=None):
    """Run the stack; returns the output and per-layer caches for backward.

    Dropout masks are drawn from ``rng`` in train mode and are skipped
    entirely in eval mode, where the layer is the identity.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1:] != net.input_shape:
        raise ValueError(
            f"batch shape {X.shape[1:]} does not match network input "
            f"{net.input_shape}"
        )
    weights = net.weights if weights is None else weights
    caches = []
    out = X
    for spec, w in zip(net.layers, weights):
        out, cache = _FWD[spec.kind](spec, w, out, train_mode, rng)
        caches.append(cache)
    return out, caches


def backward(net: NetworkParams, caches, grad_out: np.ndarray,
             inject: dict[int, np.ndarray] | None = None, weights=None):
    """Backpropagate; returns (grad_input, per-layer weight gradients).

    ``inject[i]`` is added to the gradient flowing into layer ``i``'s
    input, which is how the latent-coordinate penalty reaches the
    encoder during joint training.
    """
    weights = net.weights if weights is None else weights
    grads: list[list[np.ndarray]] = [[] for _ in net.layers]
    g = grad_out
    for i in reversed(range(len(net.layers))):
        spec = net.layers[i]
        g, wg = _BWD[spec.kind](spec, weights[i], caches[i], g)
        grads[i] = wg
        if inject and i in inject:
            g = g + inject[i]
    return g, grads


def forward_with_latent(net: NetworkParams, X: np.ndarray, train_mode: bool = False,
                        rng: np.random.Generator | None = None, weights=None):
    """Like ``forward`` but also returns the bottleneck activation."""
    if net.bottleneck_index is None:
        raise ValueError("network has no recorded bottleneck")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1:] != net.input_shape:
        raise ValueError(
            f"batch shape {X.shape[1:]} does not match network input "
            f"{net.input_shape}"
        )
    weights = net.weights if weights is None else weights
    caches = []
    out = X
    latent = None
    for i, (spec, w) in enumerate(zip(net.layers, weights)):
        if i == net.bottleneck_index:
            latent = out
        out, cache = _FWD[spec.kind](spec, w, out, train_mode, rng)
        caches.append(cache)
    return out, latent, caches
