"""SCPT v1: the bit-exact binary tensor file format used on disk.

Layout (all little endian):

    bytes 0-3   magic ``SCPT``
    byte  4     format version, currently 1
    byte  5     dtype code: 0 = float64, 1 = float32, 2 = uint8
    byte  6     ndim
    byte  7     zero pad
    next        ndim u64 dimension sizes
    rest        row-major payload

Checksums are not stored inside the file; manifests and checkpoint
indexes record a 64-bit blake2b digest of the full file bytes so that
corruption is detected at load time.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"SCPT"
VERSION = 1

_DTYPE_BY_CODE = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_BY_KIND = {("f", 8): 0, ("f", 4): 1, ("u", 1): 2}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array to SCPT bytes. Only f64, f32, and u8 payloads."""
    arr = np.asarray(arr)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_BY_KIND:
        raise DataFormatError(
            f"dtype {arr.dtype} not representable in SCPT (want f64, f32, or u8)")
    code = _CODE_BY_KIND[key]
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_BY_CODE[code]).tobytes()
    return header + dims + payload


def tensor_from_bytes(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse SCPT bytes back into an array, validating the full frame."""
    if len(data) < 8 or data[:4] != MAGIC:
        raise DataFormatError(f"{source}: not an SCPT tensor (bad magic)")
    version, code, ndim, pad = struct.unpack("<BBBB", data[4:8])
    if version != VERSION:
        raise DataFormatError(
            f"{source}: SCPT version {version} not supported (expected {VERSION})")
    if code not in _DTYPE_BY_CODE:
        raise DataFormatError(f"{source}: unknown dtype code {code}")
    if pad != 0:
        raise DataFormatError(f"{source}: nonzero pad byte")
    dims_end = 8 + 8 * ndim
    if len(data) < dims_end:
        raise DataFormatError(f"{source}: truncated SCPT header")
    shape = struct.unpack(f"<{ndim}Q", data[8:dims_end])
    dtype = _DTYPE_BY_CODE[code]
    count = 1
    for d in shape:
        count *= d
    expected = dims_end + count * dtype.itemsize
    if len(data) != expected:
        raise DataFormatError(
            f"{source}: payload size mismatch (file {len(data)} bytes, "
            f"expected {expected})")
    flat = np.frombuffer(data, dtype=dtype, offset=dims_end, count=count)
    return flat.reshape(shape).copy()


def write_tensor(path, arr: np.ndarray) -> str:
    """Write an SCPT file and return its 64-bit checksum (hex)."""
    data = tensor_to_bytes(arr)
    Path(path).write_bytes(data)
    return checksum_bytes(data)


def read_tensor(path, expected_checksum: str | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: missing tensor file")
    data = path.read_bytes()
    if expected_checksum is not None:
        actual = checksum_bytes(data)
        if actual != expected_checksum:
            raise DataFormatError(
                f"{path}: checksum mismatch (file {actual}, manifest "
                f"{expected_checksum})")
    return tensor_from_bytes(data, source=str(path))


def checksum_bytes(data: bytes) -> str:
    """64-bit blake2b digest, hex encoded."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()
