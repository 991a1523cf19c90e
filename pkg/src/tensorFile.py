"""Binary tensor files.

Layout: magic ``STBT``, version (u8), rank (u8), one u32 little-endian extent
per axis, then the float64 little-endian payload in row-major order.
"""
import struct
from pathlib import Path
from typing import Union

import numpy as np

from src.constants import TENSOR_MAGIC, TENSOR_VERSION
from src.errors import CheckpointError
from src.tensor import Tensor

HEADER = struct.Struct('<4sBB')


def encode_tensor(value: Union[Tensor, np.ndarray]) -> bytes:
    array = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    if array.ndim > 255:
        raise CheckpointError(f"rank {array.ndim} does not fit the tensor header")
    header = HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, array.ndim)
    extents = struct.pack(f'<{array.ndim}I', *array.shape)
    return header + extents + np.ascontiguousarray(array, dtype='<f8').tobytes()


def decode_tensor(blob: bytes, source: str = '<bytes>') -> np.ndarray:
    if len(blob) < HEADER.size:
        raise CheckpointError(f"{source}: truncated header")
    magic, version, rank = HEADER.unpack_from(blob)
    if magic != TENSOR_MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    offset = HEADER.size + 4 * rank
    if len(blob) < offset:
        raise CheckpointError(f"{source}: truncated extents")
    shape = struct.unpack_from(f'<{rank}I', blob, HEADER.size)
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != offset + 8 * count:
        raise CheckpointError(f"{source}: payload holds {len(blob) - offset} bytes, expected {8 * count}")
    return np.frombuffer(blob, dtype='<f8', count=count, offset=offset).astype(np.float64).reshape(shape)


def write_tensor(path: Path, value: Union[Tensor, np.ndarray]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_tensor(value))


def read_tensor(path: Path) -> np.ndarray:
    try:
        with open(path, 'rb') as f:
            return decode_tensor(f.read(), str(path))
    except FileNotFoundError:
        raise CheckpointError(f"tensor file not found: {path}")
