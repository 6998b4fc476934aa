"""Binary tensor container used for checkpoints, dataset images and debug dumps.

Layout (little-endian)::

    b"CRFCNN01"  u32 count
    repeated:    u32 name_len, name (utf-8), u8 dtype (0=f32, 1=f64),
                 u32 ndim, u32 dims[ndim], raw row-major values
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CRFCNN01"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ContainerError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise ContainerError("bad magic; not a CRFCNN01 container")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise ContainerError("truncated container")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(view):
            raise ContainerError("truncated container")
        try:
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError("tensor name is not valid UTF-8") from exc
        pos += name_len
        code, ndim = take("<BI")
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code}")
        dims = take(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(view):
            raise ContainerError("truncated container")
        out[name] = np.frombuffer(view[pos : pos + nbytes], dtype=dt).reshape(dims).copy()
        pos += nbytes
    if pos != len(view):
        raise ContainerError("trailing bytes after last tensor")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
