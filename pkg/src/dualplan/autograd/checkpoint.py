"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic   b"DPCK"
    u32     format version
    u16+str model config hash (utf-8)
    u32     tensor count
    per tensor:
        u16+str name, u8 dtype code (4 = float32, 8 = float64),
        u8 ndim, u32 * ndim extents, raw little-endian data
"""
from __future__ import annotations

import hashlib
import io
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"DPCK"
FORMAT_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def _write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw


def _read_str(buf) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def dumps(state: "OrderedDict[str, np.ndarray]", config_hash: str = "") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_str(buf, config_hash)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        arr = np.asarray(arr)
        code = arr.dtype.itemsize
        if arr.dtype.kind != "f" or code not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        _write_str(buf, name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> tuple["OrderedDict[str, np.ndarray]", str]:
    buf = io.BytesIO(raw)
    if _read_exact(buf, 4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    config_hash = _read_str(buf)
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    state = OrderedDict()
    for _ in range(count):
        name = _read_str(buf)
        code, ndim = struct.unpack("<BB", _read_exact(buf, 2))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: bad dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(buf, n * code), dtype=_DTYPES[code]).reshape(shape)
        state[name] = data.astype(data.dtype.newbyteorder("="))
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return state, config_hash


def save(path, module_or_state, config_hash: str = "") -> str:
    """Write a checkpoint; returns its sha256 hex digest."""
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    raw = dumps(state, config_hash)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load(path) -> tuple["OrderedDict[str, np.ndarray]", str]:
    return loads(Path(path).read_bytes())
