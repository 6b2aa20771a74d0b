"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"EEFL1"
    u32 header length, then a UTF-8 JSON header:
        {"version": 1, "fingerprint": ..., "config": {...}, "round": int}
    u32 segment count, then per segment:
        u16 name length, name (UTF-8)
        u8 ndim, ndim x u32 dims
        row-major float64 payload ('<f8')
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .exceptions import CheckpointError
from .model import ModelConfig, ParamSet

MAGIC = b"EEFL1"
VERSION = 1


def dumps(params: ParamSet) -> bytes:
    buf = io.BytesIO()
    header = json.dumps({
        "version": VERSION,
        "fingerprint": params.config.fingerprint(),
        "config": params.config.to_dict(),
        "round": params.round_tag,
    }, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def _read(stream, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def loads(data: bytes) -> ParamSet:
    stream = io.BytesIO(data)
    if _read(stream, len(MAGIC)) != MAGIC:
        raise CheckpointError("not an EEFL1 checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", _read(stream, 4))
    try:
        header = json.loads(_read(stream, hlen))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    config = ModelConfig.from_dict(header["config"])
    if config.fingerprint() != header["fingerprint"]:
        raise CheckpointError("config fingerprint mismatch")
    (count,) = struct.unpack("<I", _read(stream, 4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read(stream, 2))
        name = _read(stream, nlen).decode()
        (ndim,) = struct.unpack("<B", _read(stream, 1))
        shape = struct.unpack(f"<{ndim}I", _read(stream, 4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(_read(stream, 8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if stream.read(1):
        raise CheckpointError("trailing bytes after last segment")
    return ParamSet(config, arrays, round_tag=header.get("round", 0))


def save_checkpoint(path, params: ParamSet) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(params))
    os.replace(tmp, path)


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        return loads(fh.read())
