"""TNSR tensor container: the binary format shared by every pipeline stage.

Layout (all little-endian):

    bytes 0..3    magic b"TNSR"
    bytes 4..7    version, u32, currently 1
    byte  8       dtype code, u8: 0 = float32, 1 = uint8
    byte  9       ndim, u8
    then          ndim dimension sizes, u64 each
    then          payload, row-major, dtype-sized elements

Round-trips are bit-exact; malformed headers are rejected with the byte
offset of the offending field.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class TnsrFormatError(ValueError):
    """Raised on a malformed TNSR header or truncated payload."""


def write(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` (float32/float64 or uint8) to ``path`` in TNSR format."""
    arr = np.ascontiguousarray(array)
    if arr.dtype in (np.float64, np.float32):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        code = 0
    elif arr.dtype == np.uint8:
        code = 1
    else:
        raise TnsrFormatError(f"unsupported dtype {arr.dtype}; TNSR stores float32 or uint8")
    header = MAGIC + struct.pack("<I", VERSION) + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read(path: str | Path, memmap: bool = False) -> np.ndarray:
    """Read a TNSR file; with ``memmap`` the payload is mapped, not copied."""
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10:
            raise TnsrFormatError(f"{path}: truncated header ({len(head)} bytes)")
        if head[:4] != MAGIC:
            raise TnsrFormatError(f"{path}: bad magic {head[:4]!r} at offset 0")
        (version,) = struct.unpack("<I", head[4:8])
        if version != VERSION:
            raise TnsrFormatError(f"{path}: unsupported version {version} at offset 4")
        code, ndim = head[8], head[9]
        if code not in _DTYPE_CODES:
            raise TnsrFormatError(f"{path}: unknown dtype code {code} at offset 8")
        dims_raw = fh.read(8 * ndim)
        if len(dims_raw) < 8 * ndim:
            raise TnsrFormatError(f"{path}: truncated dims at offset 10")
        dims = struct.unpack(f"<{ndim}Q", dims_raw)
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
        offset = 10 + 8 * ndim
        if memmap:
            mm = np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=tuple(dims))
            return mm
        payload = fh.read()
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise TnsrFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} at offset {offset}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
