"""Minimal self-describing container for 3-D voxel grids.

Layout: magic "VOX0", format version (u8), dtype code (u8: 0 = uint8,
1 = float32), three little-endian u32 extents D,H,W, then row-major voxels.
Used for binary masks, label maps, and intensity volumes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"VOX0"
VERSION = 1

_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
_CODES = {np.dtype("uint8"): 0, np.dtype("float32"): 1}


class VolumeFormatError(ValueError):
    pass


def write_volume(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.ndim != 3:
        raise VolumeFormatError(f"expected a 3-D grid, got shape {arr.shape}")
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, code))
        fh.write(struct.pack("<III", *arr.shape))
        fh.write(arr.astype(_DTYPES[code]).tobytes())


def read_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise VolumeFormatError("bad magic; not a volume file")
    version, code = struct.unpack("<BB", blob[4:6])
    if version != VERSION:
        raise VolumeFormatError(f"unsupported volume format version {version}")
    if code not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype code {code}")
    d, h, w = struct.unpack("<III", blob[6:18])
    dtype = _DTYPES[code]
    expected = d * h * w * dtype.itemsize
    payload = blob[18:]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload length {len(payload)} does not match extents ({expected} expected)")
    return np.frombuffer(payload, dtype=dtype).reshape(d, h, w).copy()
