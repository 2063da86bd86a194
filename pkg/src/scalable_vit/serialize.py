"""The ``SVTW`` tensor container.

Layout (little-endian)::

    b"SVTW"  u32 version=1  u32 count
    per tensor: u32 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 rank,
                u32 dims[rank], raw row-major data
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"SVTW"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dumps(tensors: Mapping[str, Tensor | np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    try:
        if buf[:4] != MAGIC:
            raise FormatError("not an SVTW container (bad magic)")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported SVTW version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            if code not in _DTYPES:
                raise FormatError(f"{name}: unknown dtype code {code}")
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise FormatError(f"{name}: truncated data")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off) \
                .reshape(dims).astype(dt.newbyteorder("="))
            off += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt SVTW container: {exc}") from None
    if off != len(buf):
        raise FormatError("trailing bytes after last tensor")
    return out


def save(path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
