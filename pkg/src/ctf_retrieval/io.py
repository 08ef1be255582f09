"""Versioned binary formats: named-array records, float64 blobs and coarse index files.

Every file starts with an 8-byte magic and a little-endian uint32 version.
Arrays are stored as little-endian float64 in row-major order, so a write
followed by a read reproduces them bit for bit.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

VERSION = 1

CHECKPOINT_MAGIC = b"CTFCKPT\0"
ENCODINGS_MAGIC = b"CTFENC\0\0"
INDEX_MAGIC = b"CTFIDX\0\0"
BLOB_MAGIC = b"CTFF64\0\0"

_F64 = np.dtype("<f8")


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * n), dtype=_F64).reshape(shape).astype(np.float64)

    def header(self, magic: bytes) -> None:
        if self.take(len(magic)) != magic:
            raise FormatError(f"{self.path}: bad magic bytes")
        version = self.u32()
        if version != VERSION:
            raise FormatError(f"{self.path}: unsupported format version {version}")

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype=_F64).tobytes()


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: no such file") from exc


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------- named records


def write_records(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None,
                  magic: bytes = CHECKPOINT_MAGIC) -> None:
    """Header, JSON metadata, then ``(name, shape, data)`` for each array in order."""
    parts = [magic, struct.pack("<I", VERSION), _text(json.dumps(meta or {}, sort_keys=True)),
             struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a)
        parts += [_text(name), struct.pack("<I", a.ndim)]
        parts += [struct.pack("<Q", n) for n in a.shape]
        parts.append(_array(a))
    _atomic_write(path, b"".join(parts))


def read_records(path, magic: bytes = CHECKPOINT_MAGIC) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(_read(path), path)
    r.header(magic)
    try:
        meta = json.loads(r.text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    arrays = {}
    for _ in range(r.u32()):
        name = r.text()
        shape = tuple(r.u64() for _ in range(r.u32()))
        arrays[name] = r.array(shape)
    r.finish()
    return arrays, meta


# ---------------------------------------------------------------- float blobs


def blob_header_size(ndim: int) -> int:
    return len(BLOB_MAGIC) + 4 + 4 + 8 * ndim


def write_blob(path, a: np.ndarray) -> None:
    a = np.asarray(a)
    header = [BLOB_MAGIC, struct.pack("<II", VERSION, a.ndim)] + [struct.pack("<Q", n) for n in a.shape]
    _atomic_write(path, b"".join(header) + _array(a))


def read_blob(path) -> np.ndarray:
    r = _Reader(_read(path), path)
    r.header(BLOB_MAGIC)
    shape = tuple(r.u64() for _ in range(r.u32()))
    out = r.array(shape)
    r.finish()
    return out


# ---------------------------------------------------------------- coarse index


def write_index(path, target_ids, cls_matrix: np.ndarray, modality: str) -> None:
    cls_matrix = np.asarray(cls_matrix)
    n, d = cls_matrix.shape
    parts = [INDEX_MAGIC, struct.pack("<I", VERSION), _text(modality), struct.pack("<QQ", n, d)]
    parts += [_text(str(t)) for t in target_ids]
    parts.append(_array(cls_matrix))
    _atomic_write(path, b"".join(parts))


def read_index(path) -> tuple[list[str], np.ndarray, str]:
    r = _Reader(_read(path), path)
    r.header(INDEX_MAGIC)
    modality = r.text()
    n, d = r.u64(), r.u64()
    ids = [r.text() for _ in range(n)]
    cls_matrix = r.array((n, d))
    r.finish()
    return ids, cls_matrix, modality
