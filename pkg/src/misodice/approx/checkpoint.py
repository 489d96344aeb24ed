"""Versioned binary parameter checkpoints.

Layout: ``MSPK`` magic, u16 version, u32 metadata length, UTF-8 JSON
metadata, u32 array count, then per array: u16 name length, name, u8 ndim,
u32 dims, float64 data (little endian). A SHA-256 of all preceding bytes
closes the file.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"MSPK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: dict, meta: dict | None = None) -> bytes:
    out = bytearray(MAGIC)
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    out += struct.pack("<HI", VERSION, len(blob)) + blob
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        key = name.encode()
        out += struct.pack("<HB", len(key), arr.ndim) + key
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def loads(raw: bytes) -> tuple[dict, dict]:
    if len(raw) < 42 or raw[:4] != MAGIC:
        raise CheckpointError("not a parameter checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    version, meta_len = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    meta = json.loads(body[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    try:
        for _ in range(count):
            klen, ndim = struct.unpack_from("<HB", body, pos)
            pos += 3
            name = body[pos:pos + klen].decode()
            pos += klen
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) * 8
            if pos + n > len(body):
                raise CheckpointError(f"truncated array {name!r}")
            params[name] = np.frombuffer(body[pos:pos + n], dtype="<f8").reshape(shape).copy()
            pos += n
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after last array")
    return params, meta


def save(path, params: dict, meta: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(dumps(params, meta))


def load(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
