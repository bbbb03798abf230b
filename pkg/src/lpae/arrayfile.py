"""Binary container for named arrays, shared by checkpoints, ZCA statistics and features.

Layout (all integers little-endian)::

    b"LPAE" | version u32 | architecture hash (32 bytes)
    repeated until EOF:
        name length u32 | name (utf-8) | dtype tag u8 | rank u32 | dims u64 * rank | raw values
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"LPAE"
VERSION = 1
HASH_BYTES = 32

_TAGS = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1", 5: "<i4"}
_CODES = {np.dtype(v): k for k, v in _TAGS.items()}


def encode_arrays(arrays: dict, arch_hash: bytes = bytes(HASH_BYTES)) -> bytes:
    if len(arch_hash) != HASH_BYTES:
        raise ValueError(f"architecture hash must be {HASH_BYTES} bytes")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(arch_hash)
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = _CODES.get(np.dtype(dt))
        if code is None:
            raise TypeError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_TAGS[code]).tobytes())
    return buf.getvalue()


def decode_arrays(blob: bytes):
    """Returns ``(arch_hash, {name: array})``."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not an LPAE array file (bad magic)")
    if len(blob) < 8 + HASH_BYTES:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported file version {version} (expected {VERSION})")
    arch_hash = blob[8:8 + HASH_BYTES]
    pos = 8 + HASH_BYTES
    arrays = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(name.encode()) != nlen:
                raise CheckpointError("truncated array name")
            pos += nlen
            code, rank = struct.unpack_from("<BI", blob, pos)
            pos += 5
            if code not in _TAGS:
                raise CheckpointError(f"unknown dtype tag {code} for {name!r}")
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            dtype = np.dtype(_TAGS[code])
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated data for {name!r}")
            arrays[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize,
                                         offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt array file: {exc}") from exc
    return arch_hash, arrays


def write_arrays(path, arrays: dict, arch_hash: bytes = bytes(HASH_BYTES)):
    Path(path).write_bytes(encode_arrays(arrays, arch_hash))


def read_arrays(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return decode_arrays(blob)
