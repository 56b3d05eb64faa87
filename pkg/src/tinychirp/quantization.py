"""Post-training 8-bit affine quantization.

Per-tensor asymmetric scheme: q = clamp(round(x/s) + z, -128, 127) with
rounding half away from zero (fixed so results match across platforms).
Activation ranges come from running the float model over a calibration
set and recording min/max at every layer boundary; weight ranges come
from the tensors themselves. Ranges are widened to include zero so the
zero point always fits in int8 and exact zero is representable.

The int8 executor keeps convolution/dense arithmetic in the integer
domain with wide accumulators (checked against the int32 envelope a
microcontroller would use) and requantizes once per layer boundary.
Attention and fire blocks fall back to float on dequantized values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import weights_io
from .nn_core import (
    CONV1D,
    CONV2D,
    DROPOUT,
    FIRE1D,
    FULLY_CONNECTED,
    GLOBAL_AVG_POOL,
    MAXPOOL1D,
    MAXPOOL2D,
    RELU,
    RESHAPE,
    SINGLE_HEAD_TRANSFORMER,
    SOFTMAX,
    ModelGraph,
    WeightSet,
    _layer_forward,
    forward,
    tensor_specs,
)

QMIN, QMAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


class QuantizationError(Exception):
    pass


class EmptyCalibrationSet(QuantizationError):
    pass


class NotCalibrated(QuantizationError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError("zero point must fit in int8")


@dataclass(frozen=True)
class QuantTensor:
    q: np.ndarray  # int8
    params: QuantParams


@dataclass(frozen=True)
class QuantModel:
    graph: ModelGraph
    qtensors: Dict[int, Dict[str, QuantTensor]]
    input_params: QuantParams
    act_params: List[QuantParams]  # one per layer boundary


def _round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_value(x: float, p: QuantParams) -> int:
    q = _round_half_away(x / p.scale) + p.zero_point
    return int(np.clip(q, QMIN, QMAX))


def dequantize_value(q: int, p: QuantParams) -> float:
    return p.scale * (q - p.zero_point)


def quantize_array(x: np.ndarray, p: QuantParams) -> np.ndarray:
    q = _round_half_away(np.asarray(x, dtype=np.float64) / p.scale) + p.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize_array(q: np.ndarray, p: QuantParams) -> np.ndarray:
    return p.scale * (q.astype(np.float64) - p.zero_point)


def params_from_range(lo: float, hi: float) -> QuantParams:
    """Affine parameters covering [lo, hi] (widened to include 0)."""
    if hi == lo:
        return QuantParams(scale=1.0, zero_point=0)
    lo = min(lo, 0.0)
    hi = max(hi, 0.0)
    scale = (hi - lo) / (QMAX - QMIN)
    zero_point = int(_round_half_away(QMIN - lo / scale))
    return QuantParams(scale=scale, zero_point=int(np.clip(zero_point, QMIN, QMAX)))


def calibrate(
    model: ModelGraph, weights: WeightSet, calib_inputs: Sequence[np.ndarray]
) -> QuantModel:
    """Derive activation and weight parameters from a calibration set.

    Runs the float model over every calibration input and keeps the
    per-boundary min/max envelope.
    """
    calib_inputs = list(calib_inputs)
    if not calib_inputs:
        raise EmptyCalibrationSet("need at least one calibration input")

    n_layers = len(model.layers)
    lo = np.full(n_layers + 1, np.inf)
    hi = np.full(n_layers + 1, -np.inf)
    for x in calib_inputs:
        x = np.asarray(x, dtype=np.float32)
        lo[0] = min(lo[0], float(x.min()))
        hi[0] = max(hi[0], float(x.max()))
        _, acts = forward(model, weights, x, return_activations=True)
        for i, a in enumerate(acts):
            lo[i + 1] = min(lo[i + 1], float(a.min()))
            hi[i + 1] = max(hi[i + 1], float(a.max()))

    qtensors: Dict[int, Dict[str, QuantTensor]] = {}
    for i, layer in enumerate(model.layers):
        specs = tensor_specs(layer)
        if not specs:
            continue
        qtensors[i] = {}
        for name, _shape in specs:
            t = weights[i][name]
            p = params_from_range(float(t.min()), float(t.max()))
            qtensors[i][name] = QuantTensor(q=quantize_array(t, p), params=p)

    return QuantModel(
        graph=model,
        qtensors=qtensors,
        input_params=params_from_range(lo[0], hi[0]),
        act_params=[params_from_range(lo[i + 1], hi[i + 1]) for i in range(n_layers)],
    )


def quantized_forward(qmodel: QuantModel, x: np.ndarray) -> np.ndarray:
    """Run the int8 model; the final softmax is float on dequantized logits."""
    model = qmodel.graph
    if len(qmodel.act_params) != len(model.layers):
        raise NotCalibrated("activation parameters missing")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise QuantizationError(
            f"input {x.shape}, model expects {model.input_shape}"
        )

    q = quantize_array(x, qmodel.input_params)
    p_cur = qmodel.input_params
    for i, layer in enumerate(model.layers):
        p_out = qmodel.act_params[i]
        kind = layer.kind
        if kind in (CONV1D, CONV2D, FULLY_CONNECTED):
            real = _int_linear(layer, qmodel.qtensors[i], q, p_cur)
            q = quantize_array(real, p_out)
        elif kind == RELU:
            real = p_cur.scale * (
                np.maximum(q.astype(np.int64), p_cur.zero_point) - p_cur.zero_point
            )
            q = quantize_array(real, p_out)
        elif kind == MAXPOOL1D:
            p = layer.kernel
            c, n = q.shape
            pooled = q[:, : (n // p) * p].reshape(c, n // p, p).max(axis=2)
            q = quantize_array(dequantize_array(pooled, p_cur), p_out)
        elif kind == MAXPOOL2D:
            p = layer.kernel
            c, h, w = q.shape
            cropped = q[:, : (h // p) * p, : (w // p) * p]
            pooled = cropped.reshape(c, h // p, p, w // p, p).max(axis=(2, 4))
            q = quantize_array(dequantize_array(pooled, p_cur), p_out)
        elif kind == GLOBAL_AVG_POOL:
            acc = (q.astype(np.int64) - p_cur.zero_point).sum(axis=1)
            real = p_cur.scale * acc / q.shape[1]
            q = quantize_array(real, p_out)
        elif kind == DROPOUT:
            q = quantize_array(dequantize_array(q, p_cur), p_out)
        elif kind == RESHAPE:
            q = quantize_array(dequantize_array(q.reshape(-1), p_cur), p_out)
        elif kind == SOFTMAX:
            logits = dequantize_array(q, p_cur)
            e = np.exp(logits - logits.max())
            return e / e.sum()
        elif kind in (SINGLE_HEAD_TRANSFORMER, FIRE1D):
            # No integer kernel for these blocks; run them in float on
            # dequantized values, then rejoin the int8 stream.
            tensors = {
                name: dequantize_array(t.q, t.params)
                for name, t in qmodel.qtensors[i].items()
            }
            real = _layer_forward(layer, tensors, dequantize_array(q, p_cur))
            q = quantize_array(real, p_out)
        else:
            raise QuantizationError(f"unsupported layer kind {kind!r}")
        p_cur = p_out
    raise QuantizationError("graph did not end in Softmax")


def _int_linear(layer, qtensors, q, p_cur: QuantParams) -> np.ndarray:
    """Conv/dense in the integer domain; one float rescale at the end."""
    wt = qtensors["weights"]
    xq = q.astype(np.int64) - p_cur.zero_point
    wq = wt.q.astype(np.int64) - wt.params.zero_point
    if layer.kind == CONV1D:
        half = wt.q.shape[2] // 2
        if layer.padding == "same":
            xq = np.pad(xq, ((0, 0), (half, half)))
        windows = np.lib.stride_tricks.sliding_window_view(xq, wt.q.shape[2], axis=1)
        acc = np.tensordot(wq, windows, axes=([1, 2], [0, 2]))
    elif layer.kind == CONV2D:
        kh, kw = wt.q.shape[2], wt.q.shape[3]
        if layer.padding == "same":
            xq = np.pad(xq, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
        windows = np.lib.stride_tricks.sliding_window_view(xq, (kh, kw), axis=(1, 2))
        acc = np.tensordot(wq, windows, axes=([1, 2, 3], [0, 3, 4]))
    else:
        acc = wq @ xq
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise QuantizationError("accumulator exceeds the int32 envelope")

    real = p_cur.scale * wt.params.scale * acc.astype(np.float64)
    if "bias" in qtensors:
        b = qtensors["bias"]
        bias = dequantize_array(b.q, b.params)
        real = real + bias.reshape((-1,) + (1,) * (real.ndim - 1))
    return real


def save_quant_model(qmodel: QuantModel, path) -> None:
    """Store int8 tensors plus all affine parameters in a TCHW container."""
    tensors = {
        i: {name: t.q for name, t in layer_tensors.items()}
        for i, layer_tensors in qmodel.qtensors.items()
    }
    quant = {
        (i, name): (t.params.scale, t.params.zero_point)
        for i, layer_tensors in qmodel.qtensors.items()
        for name, t in layer_tensors.items()
    }
    activations = [
        {"boundary": "input", "scale": qmodel.input_params.scale,
         "zero_point": qmodel.input_params.zero_point}
    ] + [
        {"boundary": i, "scale": p.scale, "zero_point": p.zero_point}
        for i, p in enumerate(qmodel.act_params)
    ]
    weights_io.write_container(
        path, qmodel.graph, tensors, dtype="i8", tensor_quant=quant,
        activations=activations,
    )


def load_quant_model(model: ModelGraph, path) -> QuantModel:
    header, tensors = weights_io.read_container(path)
    if "activations" not in header:
        raise NotCalibrated(f"{path}: container has no activation parameters")

    qtensors: Dict[int, Dict[str, QuantTensor]] = {}
    by_index = {e["index"]: e for e in header["layers"]}
    for i, layer in enumerate(model.layers):
        specs = tensor_specs(layer)
        if not specs:
            continue
        if i not in by_index:
            raise weights_io.ShapeMismatch(f"{path}: missing layer {i}")
        meta = {t["name"]: t for t in by_index[i]["tensors"]}
        qtensors[i] = {}
        for name, shape in specs:
            if name not in meta or name not in tensors[i]:
                raise weights_io.ShapeMismatch(f"{path}: missing tensor {name!r}")
            arr = tensors[i][name]
            if tuple(arr.shape) != shape:
                raise weights_io.ShapeMismatch(
                    f"{path}: layer {i} tensor {name!r} shape {tuple(arr.shape)}, "
                    f"expected {shape}"
                )
            qtensors[i][name] = QuantTensor(
                q=arr,
                params=QuantParams(meta[name]["scale"], meta[name]["zero_point"]),
            )

    input_params = None
    act_params: Dict[int, QuantParams] = {}
    for a in header["activations"]:
        p = QuantParams(a["scale"], a["zero_point"])
        if a["boundary"] == "input":
            input_params = p
        else:
            act_params[int(a["boundary"])] = p
    if input_params is None or set(act_params) != set(range(len(model.layers))):
        raise NotCalibrated(f"{path}: incomplete activation parameters")

    return QuantModel(
        graph=model,
        qtensors=qtensors,
        input_params=input_params,
        act_params=[act_params[i] for i in range(len(model.layers))],
    )
