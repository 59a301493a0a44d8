"""Binary tensor archive used for weights and optimizer state.

Layout, all little-endian::

    b"SSEG"  u32 version  u32 entry_count
    per entry: u16 name_len, name (utf-8), u8 dtype tag, 4 x u32 dims, raw data

Arrays of rank < 4 store their shape left-aligned with unused dims set to 0
(a scalar is ``0 0 0 0``). Entries are written in sorted name order, so
equal contents always give byte-identical files.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"SSEG"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
TAGS = {np.dtype(v).newbyteorder("="): k for k, v in DTYPES.items()}


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        tag = TAGS.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise FormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim > 4 or 0 in arr.shape:
            raise FormatError(f"entry {name!r}: shape {arr.shape} not storable")
        raw_name = name.encode("utf-8")
        dims = list(arr.shape) + [0] * (4 - arr.ndim)
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B4I", tag, *dims))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{source}: offset {pos}: truncated while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: offset 0: bad magic, not a checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"{source}: offset 4: unsupported format version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        tag, *dims = struct.unpack("<B4I", take(17, f"header of {name!r}"))
        if tag not in DTYPES:
            raise FormatError(f"{source}: offset {pos - 17}: unknown dtype tag {tag} for {name!r}")
        shape = tuple(d for d in dims if d)
        dt = DTYPES[tag]
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(n * dt.itemsize, f"data of {name!r}"), dtype=dt)
        out[name] = data.reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"{source}: offset {pos}: trailing bytes after last entry")
    return out


def write(path, entries: Mapping[str, np.ndarray]):
    """Atomically write ``entries`` to ``path`` (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(entries))
    os.replace(tmp, path)


def read(path) -> Dict[str, np.ndarray]:
    return decode(Path(path).read_bytes(), str(path))
