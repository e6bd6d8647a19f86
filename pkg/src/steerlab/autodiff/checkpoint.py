"""Versioned binary container of named float32 tensors.

Layout (all integers little-endian)::

    b"STLB" | version u32 | record count u32 |
    per record: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | f32 payload
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from typing import Mapping

import numpy as np

from ..errors import ConfigurationError

MAGIC = b"STLB"
VERSION = 1


def dumps(records: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(records)))
    for name, arr in records.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ConfigurationError(f"record name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ConfigurationError(f"record {name!r} has rank {arr.ndim}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ConfigurationError("not an STLB container (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ConfigurationError(f"unsupported container version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count_f = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count_f, offset=pos).reshape(dims)
        pos += 4 * count_f
        out[name] = arr.astype(np.float32)
    if pos != len(data):
        raise ConfigurationError("trailing bytes after last record")
    return out


def save(path: str | os.PathLike, records: Mapping[str, np.ndarray]) -> str:
    blob = dumps(records)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def digest(records: Mapping[str, np.ndarray]) -> str:
    """SHA-256 of the serialised container; the canonical checkpoint hash."""
    return hashlib.sha256(dumps(records)).hexdigest()
