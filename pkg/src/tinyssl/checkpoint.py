"""Named-tensor checkpoint container.

Layout (little-endian)::

    b"TDCK" | u32 version | u32 meta_len | meta_len bytes of JSON metadata
    u32 tensor_count
    per tensor: u16 name_len | name (utf-8) | u8 dtype (1=f32, 2=f64) | u8 ndim
                | ndim x u32 dims | payload

Tensors keep insertion order, and the metadata JSON is written with sorted
keys, so save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"TDCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


def encode(tensors, metadata):
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf, source="<bytes>"):
    def need(pos, n, what):
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated while reading {what} at byte {pos}")

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, this build reads version {VERSION}")
    pos = 12
    need(pos, meta_len + 4, "metadata")
    metadata = json.loads(bytes(buf[pos:pos + meta_len]).decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        need(pos, 2, "tensor name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen + 2, "tensor header")
        name = bytes(buf[pos:pos + nlen]).decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        need(pos, 4 * ndim, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(pos, nbytes, f"payload of {name!r}")
        tensors[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes after offset {pos}")
    return tensors, metadata


def save(path, tensors, metadata):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode(tensors, metadata))
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as f:
        return decode(f.read(), source=str(path))
