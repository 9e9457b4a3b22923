"""Minimal binary container for named rasters/tensors.

Layout (all integers little-endian):
  magic "RSTC", u32 version, u32 record count;
  per record: u16 name length + utf-8 name, u16 role length + utf-8 role,
  u32 meta (head count for attention records, else 0), u8 scalar width
  (4 or 8), u8 ndim, u32 dims...;
  then the raw little-endian payloads in record order.
Payload length must equal prod(shape) * width; anything short is rejected.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError

MAGIC = b"RSTC"
VERSION = 1
_WIDTHS = {4: "<f4", 8: "<f8"}


@dataclass
class RasterRecord:
    name: str
    role: str
    data: np.ndarray
    meta: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype == np.float32:
            self.data = arr.astype("<f4", copy=False)
        else:
            self.data = arr.astype("<f8", copy=False)


def write_container(path, records: list[RasterRecord]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(records)))
        for rec in records:
            name = rec.name.encode("utf-8")
            role = rec.role.encode("utf-8")
            width = rec.data.dtype.itemsize
            f.write(struct.pack("<H", len(name)) + name)
            f.write(struct.pack("<H", len(role)) + role)
            f.write(struct.pack("<IBB", rec.meta, width, rec.data.ndim))
            f.write(struct.pack(f"<{rec.data.ndim}I", *rec.data.shape))
        for rec in records:
            f.write(rec.data.tobytes())
    os.replace(tmp, path)


def _need(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"container: truncated while reading {what}")
    return buf


def read_container(path) -> list[RasterRecord]:
    with open(path, "rb") as f:
        if _need(f, 4, "magic") != MAGIC:
            raise FormatError("container: bad magic")
        version, count = struct.unpack("<II", _need(f, 8, "header"))
        if version != VERSION:
            raise FormatError(f"container: unsupported version {version}")
        heads = []
        for i in range(count):
            nlen, = struct.unpack("<H", _need(f, 2, f"record {i} name length"))
            name = _need(f, nlen, f"record {i} name").decode("utf-8")
            rlen, = struct.unpack("<H", _need(f, 2, f"record {i} role length"))
            role = _need(f, rlen, f"record {i} role").decode("utf-8")
            meta, width, ndim = struct.unpack("<IBB", _need(f, 6, f"record {i} fields"))
            if width not in _WIDTHS:
                raise FormatError(f"container: record {name!r} has scalar width {width}")
            shape = struct.unpack(f"<{ndim}I", _need(f, 4 * ndim, f"record {i} shape"))
            if any(d < 1 for d in shape):
                raise FormatError(f"container: record {name!r} has empty dimension")
            heads.append((name, role, meta, width, shape))
        records = []
        for name, role, meta, width, shape in heads:
            n_bytes = int(np.prod(shape)) * width
            payload = _need(f, n_bytes, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype=_WIDTHS[width]).reshape(shape)
            records.append(RasterRecord(name=name, role=role, data=arr.copy(),
                                        meta=meta))
    return records
