"""Writer for the binary feature-file format consumed by the detector.

One file holds one C x H x W float32 feature map: a fixed header (magic,
version, three reserved bytes, then the three dims as little-endian uint32)
followed by the values as little-endian float32 in channel-major order. The
layout is shared with the detection package, which owns the reader; this
module only produces conforming bytes and never imports it.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CARG"
VERSION = 1

HEADER = struct.Struct("<4sB3sIII")


def write_feature_file(path: str | Path, data: np.ndarray) -> None:
    """Write one feature map.

    Args:
        path: destination file, created or overwritten.
        data: array of shape (C, H, W); cast to float32 on write.

    Raises:
        ValueError: on a wrong shape or non-finite values.
    """
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature map contains non-finite values")
    c, h, w = arr.shape
    header = HEADER.pack(MAGIC, VERSION, b"\x00\x00\x00", c, h, w)
    Path(path).write_bytes(header + arr.tobytes())
