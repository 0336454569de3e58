"""Deterministic binary checkpoints.

Layout: ``b"NSET"`` magic, two little-endian u32s (format version, JSON
header length), the UTF-8 JSON header, then each tensor's raw float64
little-endian bytes in header order. Tensors are sorted by name and the
header carries a CRC-32 of the concatenated payload, so identical
parameters and metadata always produce identical files.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Value

MAGIC = b"NSET"
FORMAT_VERSION = 1


class ChecksumMismatch(RuntimeError):
    """Raised when a checkpoint's payload does not match its stored CRC-32."""


class BadCheckpoint(RuntimeError):
    """Raised when a file is not a readable checkpoint of this format."""


def _as_array(tensor) -> np.ndarray:
    data = tensor.data if isinstance(tensor, Value) else tensor
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


def save_checkpoint(path, tensors: Mapping[str, object], meta: dict) -> None:
    names = sorted(tensors)
    arrays = {name: _as_array(tensors[name]) for name in names}
    payload = b"".join(arrays[name].astype("<f8").tobytes() for name in names)
    header = {
        "crc32": zlib.crc32(payload) & 0xFFFFFFFF,
        "meta": meta,
        "tensors": [{"name": name, "shape": list(arrays[name].shape)}
                    for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise BadCheckpoint(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise BadCheckpoint(f"{path}: unsupported format version {version}")
    if len(raw) < 12 + header_len:
        raise BadCheckpoint(f"{path}: truncated header")
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    payload = raw[12 + header_len:]
    if (zlib.crc32(payload) & 0xFFFFFFFF) != header["crc32"]:
        raise ChecksumMismatch(f"{path}: payload CRC-32 mismatch")
    tensors: dict[str, np.ndarray] = {}
    at = 0
    for entry in header["tensors"]:
        rows, cols = entry["shape"]
        nbytes = rows * cols * 8
        if at + nbytes > len(payload):
            raise BadCheckpoint(f"{path}: truncated tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(
            payload[at:at + nbytes], dtype="<f8").reshape(rows, cols).copy()
        at += nbytes
    if at != len(payload):
        raise BadCheckpoint(f"{path}: {len(payload) - at} trailing bytes")
    return tensors, header["meta"]


def restore_params(params: Mapping[str, Value],
                   tensors: Mapping[str, np.ndarray]) -> None:
    """Copy loaded arrays into model parameters, checking names and shapes."""
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise BadCheckpoint(
            f"parameter set mismatch: missing={missing} unexpected={extra}")
    for name, p in params.items():
        arr = tensors[name]
        if tuple(arr.shape) != p.data.shape:
            raise BadCheckpoint(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                f"model {p.data.shape}")
        p.data[...] = arr
