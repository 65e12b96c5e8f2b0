"""NTC1 named-tensor container.

Layout (all integers little-endian)::

    b"NTC1"
    u32   entry count
    per entry:
      u16   name length in bytes
      bytes UTF-8 name
      u8    dtype code (0 = float32, 1 = float64)
      u8    rank
      u32   extent, repeated rank times
      raw   row-major values, little-endian
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"NTC1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def write_ntc(stream: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    stream.write(MAGIC)
    stream.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {arr.ndim} too large")
        stream.write(struct.pack("<H", len(raw)))
        stream.write(raw)
        stream.write(struct.pack("<BB", _CODES[le], arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        stream.write(np.ascontiguousarray(arr, dtype=le).tobytes(order="C"))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated NTC1 stream")
    return buf


def read_ntc(stream: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(stream, 4) != MAGIC:
        raise CheckpointError("not an NTC1 stream (bad magic)")
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(stream, 2))
        name = _read_exact(stream, nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", _read_exact(stream, 2))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64))
        data = _read_exact(stream, size * dtype.itemsize)
        if name in out:
            raise CheckpointError(f"duplicate entry {name!r}")
        out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_ntc(fh, tensors)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_ntc(fh)


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_ntc(buf, tensors)
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    return read_ntc(io.BytesIO(blob))
