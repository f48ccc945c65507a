"""Flat binary parameter checkpoints (``.mpck``).

Layout, all integers little-endian u32::

    magic  b"MPCK"
    version
    entry count
    per entry:
        name length (bytes), UTF-8 name
        rank, then one u32 per dimension
        values as little-endian f64, row-major

Entries are written in store insertion order, so the same store always
serialises to the same bytes on every platform.
"""

import hashlib
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from src.config import _atomic_write_bytes
from src.numeric import ParameterStore

logger = logging.getLogger(__name__)

MAGIC = b"MPCK"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Corrupt, truncated or foreign checkpoint file."""


def encode_store(store: ParameterStore) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(store))]
    for name, value in store.items():
        raw_name = name.encode("utf-8")
        parts.append(_U32.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_U32.pack(value.ndim))
        parts.extend(_U32.pack(dim) for dim in value.shape)
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_store(data: bytes) -> ParameterStore:
    if len(data) < _HEADER.size:
        raise CheckpointError("truncated header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = _HEADER.size

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CheckpointError("truncated entry")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    store = ParameterStore()
    for _ in range(count):
        (name_len,) = _U32.unpack(take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = _U32.unpack(take(4))
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        store.add(name, values.astype(np.float64))
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes")
    return store


def save_checkpoint(store: ParameterStore, path: Union[str, Path]) -> str:
    """Write ``store`` atomically; returns the sha256 of the file bytes."""
    data = encode_store(store)
    _atomic_write_bytes(Path(path), data)
    digest = hashlib.sha256(data).hexdigest()
    logger.debug(f"Saved {len(store)} tensors to {path} ({digest[:12]})")
    return digest


def load_checkpoint(path: Union[str, Path]) -> ParameterStore:
    path = Path(path)
    try:
        return decode_store(path.read_bytes())
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from e


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
