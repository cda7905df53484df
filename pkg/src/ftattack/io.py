"""FTAK checkpoint format: named float32 tensors in a little-endian container.

Layout (all integers little-endian)::

    magic        4 bytes   b"FTAK"
    version      uint32    FORMAT_VERSION
    count        uint32    number of entries
    entry * count:
        name_len uint32
        name     name_len bytes, UTF-8
        rank     uint32
        dims     rank * uint64
        data     prod(dims) * float32
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"FTAK"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class CheckpointFormatError(ValueError):
    """Raised when bytes do not form a valid FTAK checkpoint."""


def save(tensors: Mapping[str, np.ndarray] | list) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise CheckpointFormatError(f"duplicate tensor names: {dupes}")
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(items))]
    for name, value in items:
        raw_name = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")  # ascontiguousarray would promote rank 0
        parts.append(_U32.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U64.pack(dim) for dim in arr.shape)
        parts.append(arr.tobytes())
    return b"".join(parts)


def load(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, "
                f"only {len(view) - pos} left"
            )
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointFormatError("bad magic, not an FTAK checkpoint")
    (version,) = _U32.unpack(take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported format version {version} (expected {FORMAT_VERSION})"
        )
    (count,) = _U32.unpack(take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = _U32.unpack(take(4, f"entry {i} name length"))
        try:
            name = bytes(take(name_len, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"entry {i} name is not UTF-8") from exc
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        (rank,) = _U32.unpack(take(4, f"{name} rank"))
        shape = tuple(_U64.unpack(take(8, f"{name} dims"))[0] for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = take(4 * size, f"{name} data")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(view):
        raise CheckpointFormatError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save_file(path, tensors, config: Mapping | None = None) -> Path:
    """Write a checkpoint; ``config`` goes to a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save(tensors))
    if config is not None:
        sidecar(path).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return path


def load_file(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return load(path.read_bytes())
    except CheckpointFormatError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_config(path) -> dict:
    side = sidecar(path)
    return json.loads(side.read_text()) if side.is_file() else {}
