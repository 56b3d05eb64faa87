"""Minimal graph representation and float forward pass for the deployable
classifiers.

Three architectures are provided as builders: a two-conv time-series CNN
(748 parameters), a conv + single-head-transformer time-series model
(1616 parameters), and a two-conv spectrogram CNN (25558 parameters).
Tensors are channels-first: 1-D activations are (C, N), 2-D are
(C, H, W). Class 0 is non-target, class 1 is the target song.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

CONV1D = "Conv1D"
CONV2D = "Conv2D"
MAXPOOL1D = "MaxPool1D"
MAXPOOL2D = "MaxPool2D"
GLOBAL_AVG_POOL = "GlobalAvgPool"
FULLY_CONNECTED = "FullyConnected"
RELU = "ReLU"
SOFTMAX = "Softmax"
DROPOUT = "Dropout"
SINGLE_HEAD_TRANSFORMER = "SingleHeadTransformer"
FIRE1D = "Fire1D"
RESHAPE = "Reshape"

TARGET_CLASS = 1
NON_TARGET_CLASS = 0

# Tensors inside a WeightSet, keyed by layer index then tensor name.
WeightSet = Dict[int, Dict[str, np.ndarray]]


class NnError(Exception):
    pass


class ShapeMismatch(NnError):
    pass


class MissingWeights(NnError):
    pass


class DegenerateFire(NnError):
    """Fire module sized down to zero filters."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: str = "same"
    has_bias: bool = False
    rate: float = 0.0  # dropout only; identity at inference
    dim: int = 0  # transformer embedding width
    squeeze: int = 0
    expand1: int = 0
    expand3: int = 0


def conv1d(
    in_channels: int,
    out_channels: int,
    kernel: int = 3,
    padding: str = "same",
    bias: bool = False,
) -> LayerSpec:
    if min(in_channels, out_channels, kernel) < 1:
        raise ValueError("channels and kernel must be >= 1")
    if padding == "same" and kernel % 2 == 0:
        raise ValueError("same-padded Conv1D requires an odd kernel")
    return LayerSpec(
        CONV1D,
        in_channels=in_channels,
        out_channels=out_channels,
        kernel=kernel,
        padding=padding,
        has_bias=bias,
    )


def conv2d(
    in_channels: int,
    out_channels: int,
    kernel: int = 3,
    padding: str = "valid",
    bias: bool = True,
) -> LayerSpec:
    if min(in_channels, out_channels, kernel) < 1:
        raise ValueError("channels and kernel must be >= 1")
    return LayerSpec(
        CONV2D,
        in_channels=in_channels,
        out_channels=out_channels,
        kernel=kernel,
        padding=padding,
        has_bias=bias,
    )


def maxpool1d(pool: int = 2) -> LayerSpec:
    return LayerSpec(MAXPOOL1D, kernel=pool, stride=pool)


def maxpool2d(pool: int = 2) -> LayerSpec:
    return LayerSpec(MAXPOOL2D, kernel=pool, stride=pool)


def global_avg_pool() -> LayerSpec:
    return LayerSpec(GLOBAL_AVG_POOL)


def fully_connected(in_features: int, out_features: int, bias: bool = False) -> LayerSpec:
    return LayerSpec(
        FULLY_CONNECTED,
        in_channels=in_features,
        out_channels=out_features,
        has_bias=bias,
    )


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def softmax() -> LayerSpec:
    return LayerSpec(SOFTMAX)


def dropout(rate: float) -> LayerSpec:
    return LayerSpec(DROPOUT, rate=rate)


def reshape() -> LayerSpec:
    return LayerSpec(RESHAPE)


def single_head_transformer(dim: int) -> LayerSpec:
    return LayerSpec(SINGLE_HEAD_TRANSFORMER, dim=dim)


def fire1d(in_channels: int, squeeze: int, expand1: int, expand3: int) -> LayerSpec:
    if min(squeeze, expand1, expand3) < 1:
        raise DegenerateFire(
            f"fire module with counts ({squeeze}, {expand1}, {expand3})"
        )
    return LayerSpec(
        FIRE1D,
        in_channels=in_channels,
        out_channels=expand1 + expand3,
        squeeze=squeeze,
        expand1=expand1,
        expand3=expand3,
    )


def fire1d_counts(x: int) -> dict:
    """Filter counts for the slimmed fire module, from an original count x."""
    base = int(0.3 * x)
    return {"squeeze": 3 * base, "expand1": 4 * base, "expand3": 4 * base}


@dataclass(frozen=True)
class ModelGraph:
    name: str
    layers: tuple
    input_shape: tuple
    shape_trace: tuple  # output shape after each layer

    @property
    def output_shape(self) -> tuple:
        return self.shape_trace[-1]


def infer_shapes(layers, input_shape) -> list:
    """Compose layer shapes, failing loudly on any inconsistency."""
    shape = tuple(input_shape)
    trace = []
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == CONV1D:
            c, n = _expect_rank(shape, 2, i, layer)
            if c != layer.in_channels:
                raise ShapeMismatch(f"layer {i} ({k}): {c} channels in, expected {layer.in_channels}")
            if layer.padding == "same":
                shape = (layer.out_channels, n)
            else:
                shape = (layer.out_channels, n - layer.kernel + 1)
        elif k == CONV2D:
            c, h, w = _expect_rank(shape, 3, i, layer)
            if c != layer.in_channels:
                raise ShapeMismatch(f"layer {i} ({k}): {c} channels in, expected {layer.in_channels}")
            if layer.padding == "same":
                shape = (layer.out_channels, h, w)
            else:
                shape = (layer.out_channels, h - layer.kernel + 1, w - layer.kernel + 1)
        elif k == MAXPOOL1D:
            c, n = _expect_rank(shape, 2, i, layer)
            shape = (c, n // layer.kernel)
        elif k == MAXPOOL2D:
            c, h, w = _expect_rank(shape, 3, i, layer)
            shape = (c, h // layer.kernel, w // layer.kernel)
        elif k == GLOBAL_AVG_POOL:
            c, _ = _expect_rank(shape, 2, i, layer)
            shape = (c,)
        elif k == FULLY_CONNECTED:
            (f,) = _expect_rank(shape, 1, i, layer)
            if f != layer.in_channels:
                raise ShapeMismatch(f"layer {i} ({k}): {f} features in, expected {layer.in_channels}")
            shape = (layer.out_channels,)
        elif k == RESHAPE:
            shape = (int(np.prod(shape)),)
        elif k == SINGLE_HEAD_TRANSFORMER:
            (f,) = _expect_rank(shape, 1, i, layer)
            if f != layer.dim:
                raise ShapeMismatch(f"layer {i} ({k}): token width {f}, expected {layer.dim}")
        elif k == FIRE1D:
            c, n = _expect_rank(shape, 2, i, layer)
            if c != layer.in_channels:
                raise ShapeMismatch(f"layer {i} ({k}): {c} channels in, expected {layer.in_channels}")
            shape = (layer.expand1 + layer.expand3, n)
        elif k in (RELU, SOFTMAX, DROPOUT):
            pass
        else:
            raise ValueError(f"unknown layer kind {k!r}")
        trace.append(shape)
    return trace


def _expect_rank(shape, rank, index, layer):
    if len(shape) != rank:
        raise ShapeMismatch(
            f"layer {index} ({layer.kind}): got shape {shape}, expected rank {rank}"
        )
    return shape


def build_graph(name: str, layers, input_shape) -> ModelGraph:
    layers = tuple(layers)
    trace = infer_shapes(layers, input_shape)
    if layers[-1].kind != SOFTMAX or trace[-1] != (2,):
        raise ShapeMismatch("classifier graphs must end in Softmax over 2 classes")
    return ModelGraph(
        name=name,
        layers=layers,
        input_shape=tuple(input_shape),
        shape_trace=tuple(trace),
    )


def build_cnn_time(input_length: int = 48000) -> ModelGraph:
    """Two temporal convolutions, pooled to 8 channel means, then a 64-unit
    classifier head. 748 parameters with bias-free layers."""
    return build_graph(
        "cnn_time",
        [
            conv1d(1, 4, 3),
            relu(),
            maxpool1d(2),
            conv1d(4, 8, 3),
            maxpool1d(2),
            dropout(0.25),
            global_avg_pool(),
            fully_connected(8, 64),
            relu(),
            fully_connected(64, 2),
            softmax(),
        ],
        (1, input_length),
    )


def build_transformer_time(input_length: int = 48000) -> ModelGraph:
    """One temporal convolution pooled to a single 16-wide token, refined by
    one attention block. 1616 parameters with bias-free layers."""
    return build_graph(
        "transformer_time",
        [
            conv1d(1, 16, 3),
            relu(),
            maxpool1d(2),
            dropout(0.25),
            global_avg_pool(),
            single_head_transformer(16),
            fully_connected(16, 2),
            softmax(),
        ],
        (1, input_length),
    )


def build_cnn_mel(frames: int = 184, n_mels: int = 80) -> ModelGraph:
    """Two 3x3 convolutions over the log-mel image, flattened into a small
    dense head. 25558 parameters with biases."""
    h1, w1 = frames - 2, n_mels - 2
    h2, w2 = h1 // 2, w1 // 2
    h3, w3 = h2 - 2, w2 - 2
    flat = 4 * (h3 // 2) * (w3 // 2)
    return build_graph(
        "cnn_mel",
        [
            conv2d(1, 4, 3, bias=True),
            relu(),
            maxpool2d(2),
            conv2d(4, 4, 3, bias=True),
            relu(),
            maxpool2d(2),
            reshape(),
            fully_connected(flat, 8, bias=True),
            relu(),
            fully_connected(8, 2, bias=True),
            softmax(),
        ],
        (1, frames, n_mels),
    )


def tensor_specs(layer: LayerSpec) -> list:
    """(name, shape) pairs for the tensors a layer owns, in storage order."""
    k = layer.kind
    if k == CONV1D:
        specs = [("weights", (layer.out_channels, layer.in_channels, layer.kernel))]
        if layer.has_bias:
            specs.append(("bias", (layer.out_channels,)))
        return specs
    if k == CONV2D:
        specs = [
            (
                "weights",
                (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
            )
        ]
        if layer.has_bias:
            specs.append(("bias", (layer.out_channels,)))
        return specs
    if k == FULLY_CONNECTED:
        specs = [("weights", (layer.out_channels, layer.in_channels))]
        if layer.has_bias:
            specs.append(("bias", (layer.out_channels,)))
        return specs
    if k == SINGLE_HEAD_TRANSFORMER:
        d = layer.dim
        return [(name, (d, d)) for name in ("wq", "wk", "wv", "wo", "ff1", "ff2")]
    if k == FIRE1D:
        specs = [
            ("squeeze_weights", (layer.squeeze, layer.in_channels, 1)),
            ("expand1_weights", (layer.expand1, layer.squeeze, 1)),
            ("expand3_weights", (layer.expand3, layer.squeeze, 3)),
        ]
        if layer.has_bias:
            specs += [
                ("squeeze_bias", (layer.squeeze,)),
                ("expand1_bias", (layer.expand1,)),
                ("expand3_bias", (layer.expand3,)),
            ]
        return specs
    return []


def param_count(model: ModelGraph) -> int:
    return sum(
        int(np.prod(shape))
        for layer in model.layers
        for _, shape in tensor_specs(layer)
    )


def validate_weights(model: ModelGraph, weights: WeightSet) -> None:
    for i, layer in enumerate(model.layers):
        for name, shape in tensor_specs(layer):
            if i not in weights or name not in weights[i]:
                raise MissingWeights(f"layer {i} ({layer.kind}) missing {name!r}")
            got = weights[i][name].shape
            if tuple(got) != shape:
                raise ShapeMismatch(
                    f"layer {i} ({layer.kind}) tensor {name!r}: shape {got}, "
                    f"expected {shape}"
                )


class SplitMix64:
    """Tiny 64-bit PRNG used for reproducible weight initialization.

    state' = state + 0x9E3779B97F4A7C15
    z = state'; z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31

    Pure-integer arithmetic, so the stream is identical on every platform.
    """

    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        return z ^ (z >> 31)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * (self.next_u64() / 2.0**64)


def seeded_init(model: ModelGraph, seed: int) -> WeightSet:
    """Deterministic uniform(-0.1, 0.1) weights from one SplitMix64 stream.

    Tensors are filled in layer order, then tensor_specs order, in C
    (row-major) element order.
    """
    rng = SplitMix64(seed)
    weights: WeightSet = {}
    for i, layer in enumerate(model.layers):
        specs = tensor_specs(layer)
        if not specs:
            continue
        weights[i] = {}
        for name, shape in specs:
            flat = np.array(
                [rng.uniform(-0.1, 0.1) for _ in range(int(np.prod(shape)))],
                dtype=np.float32,
            )
            weights[i][name] = flat.reshape(shape)
    return weights


def forward(
    model: ModelGraph,
    weights: WeightSet,
    x: np.ndarray,
    return_activations: bool = False,
):
    """Float32 forward pass. Dropout is identity; output sums to 1.

    With ``return_activations`` the per-layer outputs come back too
    (quantization calibration walks them for range statistics).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape != model.input_shape:
        raise ShapeMismatch(f"input {x.shape}, model expects {model.input_shape}")
    validate_weights(model, weights)

    activations = []
    for i, layer in enumerate(model.layers):
        x = _layer_forward(layer, weights.get(i, {}), x)
        if return_activations:
            activations.append(x)
    if return_activations:
        return x, activations
    return x


def _layer_forward(layer: LayerSpec, tensors: dict, x: np.ndarray) -> np.ndarray:
    k = layer.kind
    if k == CONV1D:
        return _conv1d(x, tensors["weights"], tensors.get("bias"), layer.padding)
    if k == CONV2D:
        return _conv2d(x, tensors["weights"], tensors.get("bias"), layer.padding)
    if k == MAXPOOL1D:
        p = layer.kernel
        c, n = x.shape
        return x[:, : (n // p) * p].reshape(c, n // p, p).max(axis=2)
    if k == MAXPOOL2D:
        p = layer.kernel
        c, h, w = x.shape
        cropped = x[:, : (h // p) * p, : (w // p) * p]
        return cropped.reshape(c, h // p, p, w // p, p).max(axis=(2, 4))
    if k == GLOBAL_AVG_POOL:
        return x.mean(axis=1)
    if k == FULLY_CONNECTED:
        out = tensors["weights"] @ x
        if "bias" in tensors:
            out = out + tensors["bias"]
        return out
    if k == RELU:
        return np.maximum(x, 0.0)
    if k == SOFTMAX:
        e = np.exp(x - x.max())
        return e / e.sum()
    if k == DROPOUT:
        return x
    if k == RESHAPE:
        return x.reshape(-1)
    if k == SINGLE_HEAD_TRANSFORMER:
        return _transformer_token(x, tensors)
    if k == FIRE1D:
        return _fire1d(x, tensors)
    raise ValueError(f"unknown layer kind {k!r}")


def _conv1d(x, w, b, padding):
    c_out, c_in, kernel = w.shape
    if padding == "same":
        half = kernel // 2
        x = np.pad(x, ((0, 0), (half, half)))
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=1)
    out = np.tensordot(w, windows, axes=([1, 2], [0, 2]))
    if b is not None:
        out = out + b[:, None]
    return out.astype(np.float32)


def _conv2d(x, w, b, padding):
    c_out, c_in, kh, kw = w.shape
    if padding == "same":
        x = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    out = np.tensordot(w, windows, axes=([1, 2, 3], [0, 3, 4]))
    if b is not None:
        out = out + b[:, None, None]
    return out.astype(np.float32)


def _transformer_token(x, tensors):
    # One token: the attention weight is softmax over a single logit, i.e.
    # exactly 1, so attention reduces to wo @ (wv @ x). Residuals around
    # both the attention and the feed-forward keep the identity path.
    attended = x + tensors["wo"] @ (tensors["wv"] @ x)
    hidden = np.maximum(tensors["ff1"] @ attended, 0.0)
    return attended + tensors["ff2"] @ hidden


def _fire1d(x, tensors):
    squeezed = np.maximum(
        _conv1d(x, tensors["squeeze_weights"], tensors.get("squeeze_bias"), "same"),
        0.0,
    )
    e1 = _conv1d(squeezed, tensors["expand1_weights"], tensors.get("expand1_bias"), "same")
    e3 = _conv1d(squeezed, tensors["expand3_weights"], tensors.get("expand3_bias"), "same")
    return np.maximum(np.concatenate([e1, e3], axis=0), 0.0)
