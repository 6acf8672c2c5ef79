"""Reader and writer for the safetensors single-file layout.

Byte layout: 8-byte little-endian unsigned header length N, then N
bytes of UTF-8 JSON mapping tensor name to {"dtype", "shape",
"data_offsets"} (plus an optional "__metadata__" object), then the data
section.  Offsets are relative to the first byte after the header;
tensor payloads are little-endian row-major.  Supported dtypes are F32,
F16 and BF16; everything decodes to float64 on load.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from . import serialization

_DTYPE_ITEMSIZE = {"F32": 4, "F16": 2, "BF16": 2}


class SafetensorsError(Exception):
    """Malformed file or unsupported content; names the tensor if known."""

    def __init__(self, message: str, tensor: str | None = None):
        self.tensor = tensor
        super().__init__(message if tensor is None else f"{message} (tensor {tensor!r})")


def _decode_payload(dtype: str, raw: bytes, shape: list[int], name: str) -> np.ndarray:
    if dtype == "F32":
        flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    elif dtype == "F16":
        flat = np.frombuffer(raw, dtype="<f2").astype(np.float64)
    elif dtype == "BF16":
        # BF16 is the high half of a float32: widen and zero-fill.
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
        flat = bits.view(np.float32).astype(np.float64)
    else:
        raise SafetensorsError(f"unknown dtype {dtype!r}", tensor=name)
    return flat.reshape(shape)


def _encode_payload(dtype: str, values: np.ndarray, name: str) -> bytes:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if dtype == "F32":
        return arr.astype("<f4").tobytes()
    if dtype == "F16":
        with np.errstate(over="ignore"):
            return arr.astype("<f2").tobytes()
    if dtype == "BF16":
        bits = arr.astype(np.float32).view(np.uint32)
        # Round to nearest even on the dropped 16 bits.
        rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
        return rounded.astype("<u2").tobytes()
    raise SafetensorsError(f"unknown dtype {dtype!r}", tensor=name)


def load_tensors(path: str) -> dict[str, np.ndarray]:
    """Read every tensor in the file, decoded to float64 arrays."""
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as err:
        raise SafetensorsError(f"cannot read {path}: {err}") from err
    if len(blob) < 8:
        raise SafetensorsError("file too short for the 8-byte header length")
    (header_len,) = struct.unpack_from("<Q", blob, 0)
    if 8 + header_len > len(blob):
        raise SafetensorsError(
            f"header length {header_len} exceeds file size {len(blob)}"
        )
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise SafetensorsError(f"malformed header JSON: {err}") from err
    if not isinstance(header, dict):
        raise SafetensorsError("header is not a JSON object")
    data = blob[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        if name == "__metadata__":
            continue
        if not isinstance(entry, dict):
            raise SafetensorsError("tensor entry is not an object", tensor=name)
        try:
            dtype = entry["dtype"]
            shape = [int(n) for n in entry["shape"]]
            begin, end = (int(n) for n in entry["data_offsets"])
        except (KeyError, TypeError, ValueError) as err:
            raise SafetensorsError(f"bad tensor entry: {err}", tensor=name) from err
        if dtype not in _DTYPE_ITEMSIZE:
            raise SafetensorsError(f"unknown dtype {dtype!r}", tensor=name)
        count = math.prod(shape) if shape else 1
        expected = count * _DTYPE_ITEMSIZE[dtype]
        if begin < 0 or end > len(data) or begin > end:
            raise SafetensorsError(
                f"data_offsets [{begin}, {end}] outside data section "
                f"of {len(data)} bytes",
                tensor=name,
            )
        if end - begin != expected:
            raise SafetensorsError(
                f"payload is {end - begin} bytes, shape {shape} as {dtype} "
                f"needs {expected}",
                tensor=name,
            )
        tensors[name] = _decode_payload(dtype, data[begin:end], shape, name)
    return tensors


def save_tensors(path: str, tensors: dict[str, np.ndarray], dtype: str = "F32") -> None:
    """Write tensors (float64 in, stored as dtype) atomically.

    Names are laid out in sorted order with a sorted-key header, so the
    same tensors always produce the same bytes.
    """
    header: dict[str, dict] = {}
    payloads: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        values = np.ascontiguousarray(tensors[name], dtype=np.float64)
        raw = _encode_payload(dtype, values, name)
        header[name] = {
            "dtype": dtype,
            "shape": list(values.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payloads.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(payloads)
    serialization.atomic_write_bytes(path, blob)
