"""Binary tensor container: a tiny, bit-exact, language-neutral format.

Layout (all integers little-endian):

    offset  size        field
    0       4           magic ``DTNS`` (0x44 0x54 0x4E 0x53)
    4       1           version, must be 1
    5       1           dtype code: 0=f32, 1=f64, 2=i64, 3=bool
    6       1           rank (number of dimensions)
    7       1           reserved, must be 0
    8       rank * 8    dims, u64 each
    ...     prod(dims)  payload, row-major (C order), little-endian

The format carries no alignment, no compression and no metadata, so any
writer/reader pair round-trips tensors bit for bit.  It is the on-disk and
on-wire tensor encoding used by the command line tools and the HTTP service.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"DTNS"
VERSION = 1

# dtype code <-> numpy dtype (explicitly little-endian for the payload).
_CODE_TO_DTYPE = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("|b1"),
}
_KIND_TO_CODE = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.bool_): 3,
}

#: dtype code used by the graph schema's dtype names.
NAME_TO_CODE = {"f32": 0, "f64": 1, "i64": 2, "bool": 3}
CODE_TO_NAME = {v: k for k, v in NAME_TO_CODE.items()}


class TensorFormatError(ValueError):
    """Raised when bytes do not decode as a valid tensor container."""


def encode(array: np.ndarray) -> bytes:
    """Serialize *array* to container bytes.

    The array dtype must be one of float32, float64, int64 or bool; anything
    else raises :class:`TensorFormatError` rather than silently converting,
    because the format is meant to be bit-exact.
    """
    arr = np.asarray(array)
    code = _KIND_TO_CODE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TensorFormatError(
            f"unsupported dtype {arr.dtype!r}; supported: f32, f64, i64, bool"
        )
    if arr.ndim > 255:
        raise TensorFormatError(f"rank {arr.ndim} exceeds the format maximum of 255")
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()
    return header + dims + payload


def decode(data: bytes) -> np.ndarray:
    """Deserialize container bytes back into a numpy array (native dtype)."""
    if len(data) < 8:
        raise TensorFormatError(f"truncated header: {len(data)} bytes, need at least 8")
    if data[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, code, rank, reserved = struct.unpack_from("<BBBB", data, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}, expected {VERSION}")
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"unknown dtype code {code}")
    if reserved != 0:
        raise TensorFormatError(f"reserved byte must be 0, got {reserved}")
    dims_end = 8 + 8 * rank
    if len(data) < dims_end:
        raise TensorFormatError(
            f"truncated dims: {len(data)} bytes, header promises {rank} dims"
        )
    shape = struct.unpack_from(f"<{rank}Q", data, 8) if rank else ()
    dtype = _CODE_TO_DTYPE[code]
    count = 1
    for d in shape:
        count *= d
    expected = dims_end + count * dtype.itemsize
    if len(data) != expected:
        raise TensorFormatError(
            f"payload size mismatch: file has {len(data)} bytes, "
            f"shape {tuple(shape)} with dtype {CODE_TO_NAME[code]} needs {expected}"
        )
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=dims_end)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def write_tensor(target: Union[str, BinaryIO], array: np.ndarray) -> None:
    """Write *array* to a path or a binary file object."""
    blob = encode(array)
    if isinstance(target, str):
        with open(target, "wb") as fh:
            fh.write(blob)
    else:
        target.write(blob)


def read_tensor(source: Union[str, bytes, BinaryIO]) -> np.ndarray:
    """Read a tensor from a path, raw bytes, or a binary file object."""
    if isinstance(source, str):
        with open(source, "rb") as fh:
            data = fh.read()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = source.read()
    return decode(data)
