"""Shared binary container for fingerprints and residuals.

Layout (little-endian):
  magic "PRNU" | u8 version=1 | u32 height | u32 width | u32 n_images | u8 flags
  | height*width float32 row-major | u32 id_len | id_len bytes UTF-8 device id
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError, IoError

MAGIC = b"PRNU"
VERSION = 1
FLAG_ZERO_MEANED = 0x01

_HEADER = struct.Struct("<4sBIIIB")


def write(path: str | os.PathLike, values: np.ndarray, n_images: int, flags: int, device_id: str) -> None:
    a = np.ascontiguousarray(values, dtype="<f4")
    if a.ndim != 2:
        raise FormatError(f"container stores 2-D arrays, got shape {a.shape}")
    ident = device_id.encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, a.shape[0], a.shape[1], n_images, flags))
            f.write(a.tobytes())
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read(path: str | os.PathLike) -> tuple[np.ndarray, int, int, str]:
    """Return (values as float64, n_images, flags, device_id)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e

    if len(data) >= 4 and data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise IoError(f"{path}: truncated container header")
    _magic, version, height, width, n_images, flags = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version} (expected {VERSION})")
    body_end = _HEADER.size + height * width * 4
    if len(data) < body_end + 4:
        raise IoError(f"{path}: truncated container payload")
    values = (
        np.frombuffer(data, dtype="<f4", count=height * width, offset=_HEADER.size)
        .astype(np.float64)
        .reshape(height, width)
    )
    (id_len,) = struct.unpack_from("<I", data, body_end)
    footer_end = body_end + 4 + id_len
    if len(data) < footer_end:
        raise IoError(f"{path}: truncated device id footer")
    if len(data) > footer_end:
        raise FormatError(f"{path}: trailing data after container footer")
    device_id = data[body_end + 4 : footer_end].decode("utf-8")
    return values, n_images, flags, device_id
