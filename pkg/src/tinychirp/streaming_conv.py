"""Point-by-point execution of Conv1D stacks that end in global average
pooling.

Because the pooled mean can be accumulated one output point at a time,
each layer only ever needs the last kernel-width window of its input.
Memory therefore scales with channels x kernel instead of channels x
segment length: for a 48000-sample segment and 3-wide kernels the live
activation count drops by four orders of magnitude.

Per-layer mechanics: a ring holds the newest K input columns (pre-seeded
with K//2 zero columns so 'same' padding matches the batch executor at
the left edge; the right edge is flushed with zeros at finalize). Max
pooling is a 2-slot reducer per channel, ReLU is applied to columns as
they emerge, and the running means are kept in double precision -- a
48000-term sum in float32 would lose about three digits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .nn_core import (
    CONV1D,
    DROPOUT,
    GLOBAL_AVG_POOL,
    MAXPOOL1D,
    RELU,
    LayerSpec,
    ModelGraph,
    WeightSet,
)

# Agreement required between the streaming path and the batch oracle.
EQUIV_RTOL = 1e-5
EQUIV_ATOL = 1e-7

_STREAMABLE = (CONV1D, RELU, MAXPOOL1D, DROPOUT)


class StreamingError(Exception):
    pass


class UnsupportedLayerInPrefix(StreamingError):
    pass


class StreamOverflow(StreamingError):
    pass


class IncompleteStream(StreamingError):
    pass


@dataclass(frozen=True)
class StreamStats:
    peak_buffered_values: int
    total_pushed: int


class _ConvStage:
    def __init__(self, layer: LayerSpec, tensors: dict):
        w = np.asarray(tensors["weights"], dtype=np.float64)
        self.c_out, self.c_in, self.kernel = w.shape
        self.w_flat = w.reshape(self.c_out, -1)  # matches ring.ravel() order
        self.bias = (
            np.asarray(tensors["bias"], dtype=np.float64)
            if "bias" in tensors
            else None
        )
        self.ring = np.zeros((self.c_in, self.kernel))
        self.count = self.kernel // 2  # virtual left-padding zeros

    def push(self, col: np.ndarray) -> list:
        self.ring[:, :-1] = self.ring[:, 1:]
        self.ring[:, -1] = col
        self.count += 1
        if self.count < self.kernel:
            return []
        out = self.w_flat @ self.ring.ravel()
        if self.bias is not None:
            out = out + self.bias
        return [out]

    def flush(self) -> list:
        emitted = []
        for _ in range(self.kernel // 2):
            emitted.extend(self.push(np.zeros(self.c_in)))
        return emitted

    def live_values(self) -> int:
        return min(self.count, self.kernel) * self.c_in

    @property
    def out_channels(self) -> int:
        return self.c_out


class _PoolStage:
    def __init__(self, channels: int, pool: int):
        self.channels = channels
        self.pool = pool
        self.pending: list = []

    def push(self, col: np.ndarray) -> list:
        self.pending.append(col)
        if len(self.pending) < self.pool:
            return []
        out = np.maximum.reduce(self.pending)
        self.pending.clear()
        return [out]

    def flush(self) -> list:
        # Floor semantics: a dangling partial window is dropped.
        self.pending.clear()
        return []

    def live_values(self) -> int:
        return len(self.pending) * self.channels

    @property
    def out_channels(self) -> int:
        return self.channels


class _MapStage:
    def __init__(self, channels: int, fn):
        self.channels = channels
        self.fn = fn

    def push(self, col: np.ndarray) -> list:
        return [self.fn(col)]

    def flush(self) -> list:
        return []

    def live_values(self) -> int:
        return 0

    @property
    def out_channels(self) -> int:
        return self.channels


class StreamState:
    """Mutable per-stream state: rings, pooling reducers, running means."""

    def __init__(self, stages, input_channels, input_length, pooled_length):
        self.stages = stages
        self.input_channels = input_channels
        self.input_length = input_length
        self.pooled_length = pooled_length
        out_channels = stages[-1].out_channels if stages else input_channels
        self.accumulators = np.zeros(out_channels)  # double precision
        self.pushed = 0
        self.emitted = 0
        self.peak_buffered_values = 0
        self.finalized = False

    def _cascade(self, cols, start: int) -> None:
        for stage_index in range(start, len(self.stages)):
            nxt = []
            for col in cols:
                nxt.extend(self.stages[stage_index].push(col))
            cols = nxt
            if not cols:
                return
        for col in cols:
            self.accumulators += col / self.pooled_length
            self.emitted += 1

    def _note_live(self) -> None:
        live = sum(s.live_values() for s in self.stages) + len(self.accumulators)
        if live > self.peak_buffered_values:
            self.peak_buffered_values = live


def stream_init(
    prefix, weights: WeightSet, input_length: int, input_channels: int = 1
) -> StreamState:
    """Build zeroed stream state for a Conv1D/ReLU/MaxPool1D/Dropout prefix.

    The pooled length (the divisor of the running mean) is fixed up front
    from ``input_length`` and the prefix's pooling arithmetic, which is
    why the stream must be told its length at init time.
    """
    prefix = list(prefix)
    if not prefix:
        raise UnsupportedLayerInPrefix("empty prefix")
    if input_length < 1:
        raise UnsupportedLayerInPrefix("input_length must be >= 1")

    stages = []
    channels = input_channels
    length = input_length
    for i, layer in enumerate(prefix):
        if layer.kind not in _STREAMABLE:
            raise UnsupportedLayerInPrefix(f"layer {i}: {layer.kind}")
        if layer.kind == CONV1D:
            if layer.padding != "same" or layer.stride != 1 or layer.kernel % 2 == 0:
                raise UnsupportedLayerInPrefix(
                    f"layer {i}: only stride-1 odd-kernel same-padded Conv1D streams"
                )
            if layer.in_channels != channels:
                raise UnsupportedLayerInPrefix(
                    f"layer {i}: expects {layer.in_channels} channels, stream has {channels}"
                )
            if i not in weights or "weights" not in weights[i]:
                raise UnsupportedLayerInPrefix(f"layer {i}: no weights provided")
            stages.append(_ConvStage(layer, weights[i]))
            channels = layer.out_channels
        elif layer.kind == MAXPOOL1D:
            stages.append(_PoolStage(channels, layer.kernel))
            length //= layer.kernel
        elif layer.kind == RELU:
            stages.append(_MapStage(channels, lambda c: np.maximum(c, 0.0)))
        else:  # Dropout: identity at inference
            stages.append(_MapStage(channels, lambda c: c))

    if length < 1:
        raise UnsupportedLayerInPrefix("prefix pools the stream down to nothing")
    return StreamState(stages, input_channels, input_length, length)


def stream_push(state: StreamState, x_n) -> None:
    """Feed one input sample (scalar, or one value per input channel)."""
    if state.pushed >= state.input_length:
        raise StreamOverflow(f"stream declared {state.input_length} samples")
    col = np.atleast_1d(np.asarray(x_n, dtype=np.float64))
    state._cascade([col], 0)
    state.pushed += 1
    state._note_live()


def stream_finalize(state: StreamState) -> Tuple[np.ndarray, StreamStats]:
    """Flush edge padding and return the channel means plus stats."""
    if state.pushed != state.input_length:
        raise IncompleteStream(
            f"{state.pushed} of {state.input_length} samples pushed"
        )
    if state.finalized:
        raise IncompleteStream("stream already finalized")
    for i, stage in enumerate(state.stages):
        state._cascade(stage.flush(), i + 1)
        state._note_live()
    state.finalized = True
    assert state.emitted == state.pooled_length, "pooled-length bookkeeping broke"
    stats = StreamStats(
        peak_buffered_values=state.peak_buffered_values,
        total_pushed=state.pushed,
    )
    return state.accumulators.copy(), stats


def conv_prefix(model: ModelGraph, weights: WeightSet):
    """Split a time-series graph at its GlobalAvgPool.

    Returns (prefix_layers, prefix_weights) with weights re-keyed to
    prefix-relative indices.
    """
    kinds = [layer.kind for layer in model.layers]
    if GLOBAL_AVG_POOL not in kinds:
        raise UnsupportedLayerInPrefix(f"{model.name} has no GlobalAvgPool")
    cut = kinds.index(GLOBAL_AVG_POOL)
    prefix = list(model.layers[:cut])
    prefix_weights = {i: weights[i] for i in range(cut) if i in weights}
    return prefix, prefix_weights


def naive_conv_avgpool_oracle(prefix, weights: WeightSet, x: np.ndarray) -> np.ndarray:
    """Reference implementation: materialize every channel, then average.

    Written for readability, not speed; the streaming path is checked
    against this.
    """
    acts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for i, layer in enumerate(prefix):
        if layer.kind == CONV1D:
            w = np.asarray(weights[i]["weights"], dtype=np.float64)
            c_out = w.shape[0]
            out = np.zeros((c_out, acts.shape[1]))
            for c in range(c_out):
                for j in range(w.shape[1]):
                    out[c] += np.convolve(acts[j], w[c, j][::-1], mode="same")
                if "bias" in weights[i]:
                    out[c] += weights[i]["bias"][c]
            acts = out
        elif layer.kind == MAXPOOL1D:
            p = layer.kernel
            c, n = acts.shape
            acts = acts[:, : (n // p) * p].reshape(c, n // p, p).max(axis=2)
        elif layer.kind == RELU:
            acts = np.maximum(acts, 0.0)
        elif layer.kind == DROPOUT:
            acts = acts.copy()
        else:
            raise UnsupportedLayerInPrefix(layer.kind)
    return acts.mean(axis=1)


def naive_live_values(prefix, input_length: int, input_channels: int = 1) -> int:
    """Activation values the batch executor materializes (sum over layers)."""
    channels = input_channels
    length = input_length
    total = 0
    for layer in prefix:
        if layer.kind == CONV1D:
            channels = layer.out_channels
        elif layer.kind == MAXPOOL1D:
            length //= layer.kernel
        total += channels * length
    return total


def run_stream(prefix, weights: WeightSet, x: np.ndarray):
    """Convenience: push a whole mono signal through and finalize."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    state = stream_init(prefix, weights, x.shape[1], input_channels=x.shape[0])
    for n in range(x.shape[1]):
        stream_push(state, x[:, n])
    return stream_finalize(state)
