"""Binary volume file format.

Layout: magic ``HAGV``, version u16, extents 3 x u32, dtype tag u8,
little-endian payload, trailing CRC32 of everything before it. Round
trips are bit-exact; truncation or corruption fails the checksum.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"HAGV"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class VolumeFormatError(RuntimeError):
    pass


def volume_write(path, vol: np.ndarray) -> None:
    arr = np.asarray(vol)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3:
        raise VolumeFormatError(f"expected a (D, H, W) volume, got shape {arr.shape}")
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        arr = arr.astype(np.float32)
        tag = 0
    header = MAGIC + struct.pack("<H3IB", VERSION, *arr.shape, tag)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    blob = header + payload
    with open(path, "wb") as f:
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))


def volume_read(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 23 or raw[:4] != MAGIC:
        raise VolumeFormatError("not a volume file (bad magic)")
    blob, tail = raw[:-4], raw[-4:]
    (crc,) = struct.unpack("<I", tail)
    if zlib.crc32(blob) != crc:
        raise VolumeFormatError("checksum mismatch: file corrupt or truncated")
    version, d, h, w, tag = struct.unpack_from("<H3IB", raw, 4)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported volume format version {version}")
    if tag not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype tag {tag}")
    dt = np.dtype(_DTYPES[tag])
    expect = d * h * w * dt.itemsize
    payload = blob[len(MAGIC) + 15:]
    if len(payload) != expect:
        raise VolumeFormatError(
            f"payload length {len(payload)} does not match extents {(d, h, w)}")
    return np.frombuffer(payload, dtype=dt).reshape(d, h, w).copy()
