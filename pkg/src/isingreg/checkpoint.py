"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"ISINGREG"  u32 version
    repeated sections:  u32 name_len, name (utf-8), u64 payload_len, payload

Sections: ``config`` (JSON), ``tensors`` (u32 count, then per tensor:
u32 name_len, name, u32 dtype_len, dtype string, u32 ndim, u64 dims...,
u64 nbytes, little-endian payload) and ``rng`` (JSON).
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"ISINGREG"
VERSION = 1


@dataclass
class CheckpointRecord:
    config: dict
    tensors: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    version: int = VERSION


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.dtype.str, "data": obj.tolist()}
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["data"], dtype=np.dtype(obj["__ndarray__"]))
        return {k: _unjson(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unjson(v) for v in obj]
    return obj


def _dump_json(obj) -> bytes:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":")).encode()


def _section(name: str, payload: bytes) -> bytes:
    n = name.encode()
    return struct.pack("<I", len(n)) + n + struct.pack("<Q", len(payload)) + payload


def _tensor_blob(tensors: dict) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dt = le.dtype.str.encode()
        n = name.encode()
        out.write(struct.pack("<I", len(n)) + n)
        out.write(struct.pack("<I", len(dt)) + dt)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = np.ascontiguousarray(le).tobytes()
        out.write(struct.pack("<Q", len(payload)) + payload)
    return out.getvalue()


def dumps(record: CheckpointRecord) -> bytes:
    return b"".join([
        MAGIC,
        struct.pack("<I", record.version),
        _section("config", _dump_json(record.config)),
        _section("tensors", _tensor_blob(record.tensors)),
        _section("rng", _dump_json(record.rng)),
    ])


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensors(buf: bytes) -> dict:
    r = _Reader(buf)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nl,) = r.unpack("<I")
        name = r.take(nl).decode()
        (dl,) = r.unpack("<I")
        dtype = np.dtype(r.take(dl).decode())
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="))
    return out


def loads(buf: bytes) -> CheckpointRecord:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not an ISINGREG checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sections = {}
    while r.pos < len(buf):
        (nl,) = r.unpack("<I")
        name = r.take(nl).decode()
        (pl,) = r.unpack("<Q")
        sections[name] = r.take(pl)
    for required in ("config", "tensors", "rng"):
        if required not in sections:
            raise FormatError(f"checkpoint missing section {required!r}")
    return CheckpointRecord(
        config=_unjson(json.loads(sections["config"])),
        tensors=_read_tensors(sections["tensors"]),
        rng=_unjson(json.loads(sections["rng"])),
        version=version,
    )


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, record: CheckpointRecord) -> None:
    atomic_write(path, dumps(record))


def load(path) -> CheckpointRecord:
    with open(path, "rb") as fh:
        return loads(fh.read())
