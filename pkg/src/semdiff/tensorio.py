"""MSDT binary tensor format.

Layout: ``b"MSDT"``, u8 version (1), u8 dtype (0 = f32, 1 = f64), u8 rank,
``rank`` little-endian u32 dims, then the raw little-endian values in
row-major order.
"""

import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DatasetIOError

MAGIC = b"MSDT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f32": 0, "f64": 1}


def dumps(array, dtype="f64"):
    if dtype not in _CODES:
        raise ConfigError(f"MSDT dtype must be one of {sorted(_CODES)}, got {dtype!r}")
    code = _CODES[dtype]
    arr = np.require(np.asarray(array, dtype=_DTYPES[code]), requirements="C")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def loads(buf):
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise DatasetIOError("not an MSDT buffer (bad magic)")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise DatasetIOError(f"unsupported MSDT version {version}")
    if code not in _DTYPES:
        raise DatasetIOError(f"unknown MSDT dtype code {code}")
    offset = 7 + 4 * rank
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != offset + count * dtype.itemsize:
        raise DatasetIOError(f"MSDT payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def save(path, array, dtype="f64"):
    """Write atomically, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(array, dtype=dtype))
    os.replace(tmp, path)


def load(path):
    try:
        return loads(Path(path).read_bytes())
    except FileNotFoundError as exc:
        raise DatasetIOError(f"missing tensor file {path}") from exc
