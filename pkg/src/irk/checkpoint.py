"""Single-file tensor checkpoints.

Layout: 8-byte magic, little-endian uint32 version, little-endian uint64
header length, UTF-8 JSON header, then raw little-endian payloads in
header order.  The header maps each name to its shape, dtype and byte
offset relative to the start of the payload section, plus a free-form
``meta`` object.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"IRKCKPT\x00"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def to_bytes(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = {}
    payload = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ContractError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset}
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(payload)


def from_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen])
    base = 20 + hlen
    out = {}
    for name, e in header["tensors"].items():
        dt = np.dtype(_DTYPES[e["dtype"]])
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=start).reshape(e["shape"])
        out[name] = arr.astype(e["dtype"])
    return out, header["meta"]


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())
