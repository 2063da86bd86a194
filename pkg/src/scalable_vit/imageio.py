"""Binary PPM (P6) / PGM (P5) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    vals, i, n = [], 2, len(buf)
    while len(vals) < count:
        while i < n and (buf[i:i + 1].isspace() or buf[i:i + 1] == b"#"):
            if buf[i:i + 1] == b"#":
                while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                    i += 1
            else:
                i += 1
        start = i
        while i < n and buf[i:i + 1].isdigit():
            i += 1
        if start == i:
            raise FormatError("malformed PNM header")
        vals.append(int(buf[start:i]))
    if i >= n or not buf[i:i + 1].isspace():
        raise FormatError("malformed PNM header: missing whitespace before raster")
    return vals, i + 1


def decode_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode P5/P6 bytes into ``(samples, maxval)``; samples are ``(H, W)`` or ``(H, W, 3)``."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}; expected binary P5 or P6")
    (w, h, maxval), off = _tokens(buf, 3)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid PNM dimensions/maxval: {w}x{h}, maxval={maxval}")
    chans = 3 if magic == b"P6" else 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * chans * dt.itemsize
    if len(buf) - off < need:
        raise FormatError(f"truncated raster: need {need} bytes, have {len(buf) - off}")
    arr = np.frombuffer(buf, dtype=dt, count=w * h * chans, offset=off).astype(np.int64)
    if arr.max(initial=0) > maxval:
        raise FormatError("sample exceeds maxval")
    return arr.reshape((h, w, 3) if chans == 3 else (h, w)), maxval


def read_ppm(path) -> np.ndarray:
    """P6 image as float64 ``(H, W, 3)`` scaled to [0, 1]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: expected a binary PPM (P6)")
    arr, maxval = decode_pnm(buf)
    return arr.astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    """P5 image as raw integer samples ``(H, W)``."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: expected a binary PGM (P5)")
    return decode_pnm(buf)[0]


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write ``(H, W, 3)`` samples; floats are taken as [0, 1]."""
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {a.shape}")
    if a.dtype.kind == "f":
        a = np.clip(np.rint(a * 255), 0, 255)
    a = a.astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + a.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    a = np.asarray(gray)
    if a.ndim != 2:
        raise ValueError(f"expected (H, W), got {a.shape}")
    a = a.astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + a.tobytes())


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to 0..255; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
