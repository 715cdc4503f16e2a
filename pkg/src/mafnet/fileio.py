"""Binary tensor dumps (MAFT) and 8-bit netpbm images.

MAFT layout: ``b"MAFT"``, version byte 0x01, dtype byte (0x01 float32,
0x02 float64), rank byte, ``rank`` little-endian uint32 extents, then the
row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MAFT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    if arr.ndim > 255:
        raise FormatError("rank too large")
    header = MAGIC + bytes([VERSION, _CODES[arr.dtype], arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("not a MAFT tensor (bad magic)")
    version, code, rank = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise FormatError(f"unsupported MAFT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown MAFT dtype code {code:#04x}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated MAFT header")
    shape = struct.unpack(f"<{rank}I", buf[7:off])
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != count * dtype.itemsize:
        raise FormatError(f"MAFT payload has {len(buf) - off} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(buf, dtype=dtype, offset=off, count=count).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path, arr: np.ndarray):
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("truncated netpbm header")
        tokens.append(data[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_netpbm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval <= 255.

    Returns uint8 ``[H, W]`` for PGM and ``[H, W, 3]`` for PPM.
    """
    data = Path(path).read_bytes()
    tokens, off = _read_header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported netpbm magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FormatError(f"{path}: malformed header") from e
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FormatError(f"{path}: need positive size and 8-bit maxval, got {width}x{height} max {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = data[off:off + need]
    if len(raster) != need:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    img = np.frombuffer(raster, dtype=np.uint8)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img.reshape((height, width, 3) if channels == 3 else (height, width)).copy()


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, img: np.ndarray):
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM needs an [H, W, 3] array, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def to_uint8_preview(values: np.ndarray, rowwise: bool = False) -> np.ndarray:
    """Scale non-negative values so the maximum maps to 255 (per row when ``rowwise``)."""
    v = np.asarray(values, dtype=np.float64)
    peak = v.max(axis=-1, keepdims=True) if rowwise else v.max()
    peak = np.where(peak > 0, peak, 1.0)
    return np.clip(np.round(v / peak * 255.0), 0, 255).astype(np.uint8)
