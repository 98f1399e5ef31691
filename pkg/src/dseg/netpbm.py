"""Minimal binary PGM (P5) and PPM (P6) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _read_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def _parse(data: bytes) -> tuple[bytes, int, int, int, bytes]:
    tokens, offset = _read_tokens(data, 4)
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise NetpbmError(f"bad header: {tokens!r}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise NetpbmError(f"bad header values: {width}x{height} maxval={maxval}")
    return magic, width, height, maxval, data[offset:]


def write_pgm16(path: str | Path, array: np.ndarray) -> None:
    """Write a 2D integer array as a 16-bit big-endian P5 file (maxval 65535)."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise NetpbmError(f"PGM needs a 2D array, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise NetpbmError("values outside the 16-bit range")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(">u2").tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    magic, w, h, maxval, raster = _parse(Path(path).read_bytes())
    if magic != b"P5":
        raise NetpbmError(f"not a binary PGM: magic {magic!r}")
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(raster) < need:
        raise NetpbmError("truncated raster")
    return np.frombuffer(raster[:need], dtype=dtype).reshape(h, w).astype(np.int64)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise NetpbmError(f"PPM needs an HxWx3 array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise NetpbmError("values outside the 8-bit range")
        arr = arr.astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    magic, w, h, maxval, raster = _parse(Path(path).read_bytes())
    if magic != b"P6":
        raise NetpbmError(f"not a binary PPM: magic {magic!r}")
    if maxval > 255:
        raise NetpbmError("only 8-bit PPM is supported")
    need = w * h * 3
    if len(raster) < need:
        raise NetpbmError("truncated raster")
    return np.frombuffer(raster[:need], dtype=np.uint8).reshape(h, w, 3).copy()
