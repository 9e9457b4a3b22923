"""16-bit grayscale PNG depth with a JSON sidecar (scale/offset/invalid raw value)."""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from ..errors import FormatError
from ..metrics import DepthMap

SIDECAR_KEYS = ("scale", "offset", "invalid_value")


def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def read_depth_png16(path, sidecar=None, space: str = "depth") -> DepthMap:
    """Decode ``raw * scale + offset``; pixels equal to ``invalid_value`` are
    masked out. The sidecar defaults to ``<path>.json`` and is mandatory."""
    sc_path = sidecar_path(path) if sidecar is None else os.fspath(sidecar)
    if not os.path.exists(sc_path):
        raise FormatError(f"png16: missing sidecar {sc_path}")
    with open(sc_path, "r", encoding="utf-8") as f:
        try:
            sc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"png16: unparseable sidecar {sc_path}: {exc}") from exc
    for key in SIDECAR_KEYS:
        if key not in sc:
            raise FormatError(f"png16: sidecar {sc_path} lacks {key!r}")

    img = Image.open(path)
    if img.mode not in ("I;16", "I;16B", "I"):
        raise FormatError(
            f"png16: expected a 16-bit single-channel image, got mode {img.mode!r}")
    raw = np.asarray(img, dtype=np.int64)
    if raw.ndim != 2:
        raise FormatError(f"png16: expected one channel, got shape {raw.shape}")
    if raw.max() > 0xFFFF or raw.min() < 0:
        raise FormatError("png16: sample values exceed 16-bit range")

    values = (raw.astype(np.float64) * float(sc["scale"]) + float(sc["offset"]))[None]
    valid = (raw != int(sc["invalid_value"]))[None]
    if space == "depth":
        valid &= values > 0
    return DepthMap(values=values, valid=valid, space=space)


def write_depth_png16(raw: np.ndarray, path, *, scale: float, offset: float = 0.0,
                      invalid_value: int = 0) -> None:
    """Store raw 16-bit samples plus the sidecar describing their decoding."""
    arr = np.asarray(raw)
    if arr.ndim != 2:
        raise FormatError(f"png16: raw samples must be 2-d, got {arr.shape}")
    if arr.min() < 0 or arr.max() > 0xFFFF:
        raise FormatError("png16: raw samples out of 16-bit range")
    Image.fromarray(arr.astype(np.uint16)).save(os.fspath(path))
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump({"scale": scale, "offset": offset, "invalid_value": invalid_value},
                  f, sort_keys=True)
        f.write("\n")
