"""Flat checkpoint container.

Layout (all integers little-endian)::

    b"DPTNCKPT"  u32 version
    u32 header_len, header_len bytes of UTF-8 JSON (config, seed, step, ...)
    u32 n_entries
    n_entries x [u16 name_len, name, u8 ndim, ndim x u32 dims, prod(dims) x f64]

Entry names mirror the module hierarchy, e.g. ``en_c.conv1.w``. Entries are
written in the order given, so identical state gives identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPTNCKPT"
VERSION = 1


def save(path, tensors, header):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load(path):
    """Returns (header dict, {name: float64 array})."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a DPTN checkpoint")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return header, tensors
