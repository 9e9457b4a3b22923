"""Grayscale PFM ("Pf") reader/writer.

Header: magic line, "width height", then a scale line whose sign encodes
endianness (negative = little-endian). The raster is float32, stored
bottom-to-top. Color "PF" files are rejected. Written files round-trip
bit-exactly.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import FormatError
from ..metrics import DepthMap


def _read_token_line(f) -> bytes:
    line = f.readline()
    if not line:
        raise FormatError("pfm: truncated header")
    return line.strip()


def read_pfm(path, space: str = "depth") -> DepthMap:
    """Load a PFM raster; non-finite values (and values <= 0 when
    ``space='depth'``) become invalid mask entries."""
    with open(path, "rb") as f:
        magic = _read_token_line(f)
        if magic == b"PF":
            raise FormatError("pfm: color 'PF' rasters are unsupported (need 'Pf')")
        if magic != b"Pf":
            raise FormatError(f"pfm: bad magic {magic!r}")
        dims = _read_token_line(f).split()
        if len(dims) != 2:
            raise FormatError(f"pfm: bad dimensions line {dims!r}")
        try:
            width, height = int(dims[0]), int(dims[1])
        except ValueError as exc:
            raise FormatError(f"pfm: non-integer dimensions {dims!r}") from exc
        if width < 1 or height < 1:
            raise FormatError(f"pfm: invalid size {width}x{height}")
        try:
            scale = float(_read_token_line(f))
        except ValueError as exc:
            raise FormatError("pfm: bad scale line") from exc
        if scale == 0.0:
            raise FormatError("pfm: zero scale")
        endian = "<" if scale < 0 else ">"
        payload = f.read(width * height * 4)
        if len(payload) != width * height * 4:
            raise FormatError(
                f"pfm: truncated payload ({len(payload)} of {width * height * 4} bytes)")
    flat = np.frombuffer(payload, dtype=endian + "f4")
    rows = flat.reshape(height, width)[::-1]  # bottom-to-top storage
    values = rows.astype(np.float64)[None]
    valid = np.isfinite(values)
    if space == "depth":
        valid &= values > 0
    return DepthMap(values=values, valid=valid, space=space)


def write_pfm(depth_map: DepthMap | np.ndarray, path) -> None:
    """Write a raster as little-endian grayscale PFM (scale line -1.0)."""
    values = depth_map.values if isinstance(depth_map, DepthMap) else np.asarray(depth_map)
    if values.ndim == 3:
        if values.shape[0] != 1:
            raise FormatError(f"pfm: expected single channel, got {values.shape}")
        values = values[0]
    if values.ndim != 2:
        raise FormatError(f"pfm: expected a 2-d raster, got shape {values.shape}")
    h, w = values.shape
    data = values.astype("<f4")[::-1]  # store bottom-to-top
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(data.tobytes())
    os.replace(tmp, path)
