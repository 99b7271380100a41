"""``.mcat`` tensor files.

Layout (little-endian): b"MCAT", u32 version, u32 ndim, ndim x u64 dims,
then prod(dims) x f32 values in row-major order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import McaError
from .tensor import Tensor

MAGIC = b"MCAT"
VERSION = 1


class McatFormatError(McaError, ValueError):
    pass


def encode(t: Tensor) -> bytes:
    arr = np.asarray(t.array, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes) -> Tensor:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise McatFormatError("not an .mcat file (bad magic)")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise McatFormatError(f"unsupported .mcat version {version}")
    off = 12
    if len(buf) < off + 8 * ndim:
        raise McatFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise McatFormatError(f"payload is {len(buf) - off} bytes, expected {4 * count}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)
    return Tensor._wrap(arr)


def write(path: str | os.PathLike, t: Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(t))
    os.replace(tmp, path)
    return path


def read(path: str | os.PathLike) -> Tensor:
    return decode(Path(path).read_bytes())
