"""FFTN binary tensor files.

Layout: magic ``FFTN``, version byte, dtype byte (0 = little-endian float32),
rank byte, ``rank`` little-endian uint32 extents, then the row-major payload.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .tensor import Tensor

MAGIC = b"FFTN"
VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    """Raised for malformed or unsupported FFTN content."""


def encode(t: Union[Tensor, np.ndarray]) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype != np.float32:
        raise FormatError(f"FFTN stores float32 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank does not fit in one byte")
    header = MAGIC + bytes([VERSION, DTYPE_F32, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("missing FFTN magic")
    version, dtype, rank = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise FormatError(f"unsupported FFTN version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported FFTN dtype code {dtype}")
    offset = 7 + 4 * rank
    if len(buf) < offset:
        raise FormatError("truncated FFTN header")
    shape = struct.unpack(f"<{rank}I", buf[7:offset])
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != offset + 4 * count:
        raise FormatError(f"payload size {len(buf) - offset} does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)


def save(path: Union[str, Path], t: Union[Tensor, np.ndarray]) -> None:
    Path(path).write_bytes(encode(t))


def load(path: Union[str, Path]) -> np.ndarray:
    return decode(Path(path).read_bytes())
