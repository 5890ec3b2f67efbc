"""Flat binary tensor container with bit-exact round-trips.

Layout: magic "PMSS", format version u32, entry count u32; per entry a u16
name length, UTF-8 name, dtype tag u8 (0=f64, 1=f32), rank u8, extents as
u64, then raw element data. All integers and elements little-endian.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMSS"
VERSION = 1

_TAG_TO_DTYPE = {0: "<f8", 1: "<f4"}
_DTYPE_TO_TAG = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(Exception):
    def __init__(self, message: str, kind: str):
        super().__init__(message)
        self.kind = kind  # "magic" | "version" | "truncated" | "dtype"


def pack_entry(name: str, arr: np.ndarray) -> bytes:
    tag = _DTYPE_TO_TAG.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}", "dtype")
    raw = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<BB", tag, arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
    parts.append(np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes())
    return b"".join(parts)


def checkpoint_bytes(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    parts.extend(pack_entry(name, arr) for name, arr in entries.items())
    return b"".join(parts)


def write_checkpoint(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(entries))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated", "truncated")
        piece = self.blob[self.pos : self.pos + n]
        self.pos += n
        return piece


def read_checkpoint_bytes(blob: bytes) -> dict[str, np.ndarray]:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes, not a PMSS checkpoint", "magic")
    version, count = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", "version")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BB", r.take(2))
        if tag not in _TAG_TO_DTYPE:
            raise CheckpointError(f"unknown dtype tag {tag} in entry {name!r}", "dtype")
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        n_elem = int(np.prod(shape, dtype=np.int64)) if rank else 1
        dtype = np.dtype(_TAG_TO_DTYPE[tag])
        data = np.frombuffer(r.take(n_elem * dtype.itemsize), dtype=dtype)
        entries[name] = data.reshape(shape).copy()
    return entries


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return read_checkpoint_bytes(Path(path).read_bytes())


def sha256_entries(entries: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(checkpoint_bytes(entries)).hexdigest()
