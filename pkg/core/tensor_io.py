"""
HATK binary tensor files.

Layout (all little-endian):
    magic    4 bytes  b"HATK"
    version  u16
    dtype    u8       1=f32 2=f64 3=i64 4=u8 5=bool
    rank     u8
    dims     rank x u64
    payload  row-major elements
"""

import logging
import math
import struct
from pathlib import Path
from typing import Union

import numpy as np

from core.errors import TensorFormatError

logger = logging.getLogger(__name__)

MAGIC = b"HATK"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
    np.dtype("bool"): 5,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

_HEADER = struct.Struct("<4sHBB")


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    code = DTYPE_CODES.get(np.dtype(dtype))
    if code is None:
        raise TensorFormatError(f"unsupported dtype {array.dtype}")
    if array.ndim > 255:
        raise TensorFormatError(f"rank {array.ndim} too large")

    header = _HEADER.pack(MAGIC, VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=CODE_DTYPES[code]).tobytes()
    return header + dims + payload


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, code, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")

    offset = _HEADER.size
    if len(data) < offset + 8 * rank:
        raise TensorFormatError("truncated dims")
    shape = struct.unpack_from(f"<{rank}Q", data, offset)
    offset += 8 * rank

    dtype = CODE_DTYPES[code]
    # exact Python ints; u64 dims can overflow int64 products
    expected = math.prod(shape) * dtype.itemsize
    if len(data) - offset != expected:
        raise TensorFormatError(f"payload is {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape).copy()


def save_tensor(path: Union[str, Path], array: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))
    logger.debug(f"Wrote tensor {array.shape} to {path}")


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
