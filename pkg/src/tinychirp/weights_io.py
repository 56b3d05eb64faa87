"""TCHW weight container: header JSON + aligned tensor blobs + CRC32.

Layout (little-endian):

    magic "TCHW" | version u32 | header_len u32 | header JSON (UTF-8)
    | padding to 8 bytes | tensor blobs, each 8-byte aligned | crc32 u32

The CRC covers the whole payload region. Weights sit on SD-card-class
storage in the field, where silent corruption is a real failure mode.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .nn_core import ModelGraph, WeightSet, tensor_specs, validate_weights

MAGIC = b"TCHW"
FORMAT_VERSION = 1

_DTYPES = {"f32": "<f4", "i8": "i1"}


class ContainerError(Exception):
    pass


class MagicMismatch(ContainerError):
    pass


class VersionUnsupported(ContainerError):
    pass


class ChecksumFailure(ContainerError):
    pass


class ShapeMismatch(ContainerError):
    pass


def _align8(n: int) -> int:
    return (n + 7) & ~7


def write_container(
    path,
    model: ModelGraph,
    tensors: Dict[int, Dict[str, np.ndarray]],
    dtype: str = "f32",
    tensor_quant: Optional[dict] = None,
    activations: Optional[list] = None,
) -> None:
    """Serialize tensors for a graph; dtype is "f32" or "i8".

    ``tensor_quant`` maps (layer_index, name) -> (scale, zero_point) for
    int8 payloads; ``activations`` is the per-boundary parameter list a
    quantized model needs at load time.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    blobs = []
    layer_entries = []
    offset = 0
    for i, layer in enumerate(model.layers):
        specs = tensor_specs(layer)
        if not specs:
            continue
        entry = {"index": i, "kind": layer.kind, "tensors": []}
        for name, _shape in specs:
            arr = np.ascontiguousarray(tensors[i][name], dtype=_DTYPES[dtype])
            blob = arr.tobytes()
            offset = _align8(offset)
            tensor_entry = {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
            if tensor_quant is not None:
                scale, zero_point = tensor_quant[(i, name)]
                tensor_entry["scale"] = float(scale)
                tensor_entry["zero_point"] = int(zero_point)
            entry["tensors"].append(tensor_entry)
            blobs.append((offset, blob))
            offset += len(blob)
        layer_entries.append(entry)

    header = {"model": model.name, "layers": layer_entries}
    if activations is not None:
        header["activations"] = activations
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    payload = bytearray(offset)
    for off, blob in blobs:
        payload[off : off + len(blob)] = blob

    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", FORMAT_VERSION, len(header_bytes))
    out += header_bytes
    out += b"\x00" * (_align8(len(out)) - len(out))
    out += payload
    out += struct.pack("<I", zlib.crc32(bytes(payload)))
    Path(path).write_bytes(bytes(out))


def read_container(path):
    """Parse and verify a container; returns (header, tensors) where
    tensors maps layer index -> name -> ndarray (f32 or i8 as stored)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise MagicMismatch(f"{path}: bad magic")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"{path}: format version {version}")
    header_end = 12 + header_len
    header = json.loads(raw[12:header_end].decode("utf-8"))
    payload_start = _align8(header_end)
    payload = raw[payload_start:-4]
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumFailure(f"{path}: payload CRC mismatch")

    tensors: Dict[int, Dict[str, np.ndarray]] = {}
    for entry in header["layers"]:
        idx = entry["index"]
        tensors[idx] = {}
        for t in entry["tensors"]:
            blob = payload[t["offset"] : t["offset"] + t["nbytes"]]
            arr = np.frombuffer(blob, dtype=_DTYPES[t["dtype"]])
            tensors[idx][t["name"]] = arr.reshape(t["shape"]).copy()
    return header, tensors


def save_weights(model: ModelGraph, weights: WeightSet, path) -> None:
    """Write float32 weights for a graph (bit-exact roundtrip)."""
    validate_weights(model, weights)
    write_container(path, model, weights, dtype="f32")


def load_weights(model: ModelGraph, path) -> WeightSet:
    """Read float32 weights, checking shapes against the graph."""
    header, tensors = read_container(path)
    weights: WeightSet = {}
    for i, layer in enumerate(model.layers):
        specs = tensor_specs(layer)
        if not specs:
            continue
        weights[i] = {}
        for name, shape in specs:
            if i not in tensors or name not in tensors[i]:
                raise ShapeMismatch(f"{path}: missing tensor {name!r} for layer {i}")
            arr = tensors[i][name]
            if tuple(arr.shape) != shape:
                raise ShapeMismatch(
                    f"{path}: layer {i} tensor {name!r} has shape "
                    f"{tuple(arr.shape)}, graph expects {shape}"
                )
            if arr.dtype != np.float32:
                raise ShapeMismatch(f"{path}: tensor {name!r} is not f32")
            weights[i][name] = arr
    return weights


def payload_nbytes(path) -> int:
    """Total tensor bytes in a container (excludes header and padding)."""
    header, _ = read_container(path)
    return sum(t["nbytes"] for e in header["layers"] for t in e["tensors"])
