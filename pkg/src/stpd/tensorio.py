"""Portable binary tensor files (".stp").

File layout, byte-exact and independent of host endianness:

    magic       4 bytes, ASCII "STEN"
    version     1 byte, currently 1
    dtype code  1 byte: 1 = float32, 2 = float64
    rank        1 byte, 1..5
    dims        rank x uint64, little-endian
    payload     row-major little-endian values, exactly prod(dims) elements
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"STEN"
VERSION = 1
MAX_RANK = 5

_DTYPE_FOR_CODE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class TensorFormatError(ValueError):
    """Raised for malformed .stp files or unsupported tensors."""


def _check_shape(shape: tuple[int, ...], origin: str) -> None:
    if not 1 <= len(shape) <= MAX_RANK:
        raise TensorFormatError(f"{origin}: rank {len(shape)} outside 1..{MAX_RANK}")
    if any(d < 1 for d in shape):
        raise TensorFormatError(f"{origin}: all dimensions must be >= 1, got {shape}")


def write_tensor(arr: np.ndarray, path) -> None:
    """Write ``arr`` (float32/float64, rank 1..5) to ``path`` in .stp layout."""
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR_DTYPE:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    _check_shape(arr.shape, "write_tensor")
    code = _CODE_FOR_DTYPE[arr.dtype]
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(le).tobytes())
    except OSError as e:
        raise OSError(f"cannot write tensor file {path}: {e}") from e


def read_tensor(path) -> np.ndarray:
    """Read an .stp file back into an ndarray (native byte order)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise OSError(f"cannot read tensor file {path}: {e}") from e

    if len(raw) < 7 or raw[:4] != MAGIC:
        raise TensorFormatError(f"not a tensor file: {path}")
    version, code, rank = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version} in {path}")
    if code not in _DTYPE_FOR_CODE:
        raise TensorFormatError(f"unsupported dtype code {code} in {path}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"corrupt file: rank {rank} outside 1..{MAX_RANK} in {path}")
    dims_end = 7 + 8 * rank
    if len(raw) < dims_end:
        raise TensorFormatError(f"corrupt file: truncated header in {path}")
    shape = struct.unpack_from(f"<{rank}Q", raw, 7)
    _check_shape(shape, f"read_tensor({path})")
    dtype = _DTYPE_FOR_CODE[code]
    n = int(np.prod(shape))
    if len(raw) - dims_end != n * dtype.itemsize:
        raise TensorFormatError(f"corrupt file: payload size mismatch in {path}")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=dims_end)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
