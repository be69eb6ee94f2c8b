"""Portable FloatMap codec (Pf grayscale, PF color), lossless for float32.

Maps are written little-endian (scale -1.0) with the format's bottom-to-top
row order. Big-endian files (positive scale) are byte-swapped on read.
Structural failures raise :class:`CodecError` carrying the byte offset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class CodecError(ValueError):
    """Malformed or truncated file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf) and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise CodecError("unexpected end of header", start)
    return buf[start:pos], pos


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array, (H, W) or (H, W, 3), top-down rows."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise CodecError(f"bad magic {magic!r}; expected 'PF' or 'Pf'", 0)
    wtok, pos = _read_token(buf, pos)
    htok, pos = _read_token(buf, pos)
    stok, pos = _read_token(buf, pos)
    try:
        width, height = int(wtok), int(htok)
        scale = float(stok)
    except ValueError:
        raise CodecError("non-numeric header field", pos) from None
    if width <= 0 or height <= 0:
        raise CodecError("non-positive image dimensions", pos)
    if scale == 0:
        raise CodecError("zero scale factor", pos)
    pos += 1  # single whitespace byte terminates the header
    n_values = width * height * channels
    expected = n_values * 4
    if len(buf) - pos < expected:
        raise CodecError(
            f"truncated payload: expected {expected} bytes, found {len(buf) - pos}",
            len(buf))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=n_values, offset=pos)
    if scale > 0:
        data = data.astype("<f4")  # byte-swap big-endian payloads
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.ascontiguousarray(data.reshape(shape)[::-1])


def write_pfm(path, data: np.ndarray, scale: float = -1.0) -> None:
    """Write a float array as little-endian PFM (scale must stay negative)."""
    if scale >= 0:
        raise ValueError("only little-endian output is supported (scale < 0)")
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError("PFM supports (H, W) or (H, W, 3) arrays")
    height, width = arr.shape[:2]
    header = b"%s\n%d %d\n%s\n" % (magic, width, height, repr(float(scale)).encode())
    payload = np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)
