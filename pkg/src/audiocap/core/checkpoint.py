"""Versioned binary checkpoint container.

File layout, all integers little-endian::

    magic     8 bytes   b"ACAPCKPT"
    version   u32       FORMAT_VERSION
    meta_len  u32       length of the UTF-8 JSON meta blob that follows
    meta      bytes     JSON object, keys sorted; always holds "arch"
    count     u32       number of tensor records
    record*   name_len u16, name UTF-8, ndim u8, dims u32 * ndim,
              data float64 * prod(dims) (C order)
    crc32     u32       zlib.crc32 of every preceding byte

Tensors are stored as raw IEEE-754 doubles, so save/load is bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ACAPCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    entries: "OrderedDict[str, np.ndarray]"
    arch: str
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.entries = OrderedDict(
            (k, np.ascontiguousarray(v, dtype=np.float64)) for k, v in self.entries.items()
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (self.arch, self.version, self.meta) != (other.arch, other.version, other.meta):
            return False
        if list(self.entries) != list(other.entries):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    def names(self) -> list[str]:
        return list(self.entries)


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta)
    meta["arch"] = ckpt.arch
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_blob)), meta_blob,
             struct.pack("<I", len(ckpt.entries))]
    for name, arr in ckpt.entries.items():
        raw = name.encode("utf-8")
        if not np.isfinite(arr).all():
            raise CheckpointError(f"non-finite values in {name!r}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<II", blob, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    pos += 8
    try:
        meta = json.loads(body[pos: pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        entries: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos: pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = math.prod(shape)
            data = np.frombuffer(body, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            if name in entries:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            entries[name] = data.astype(np.float64).reshape(shape)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint body: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor record")
    arch = meta.pop("arch", None)
    if not isinstance(arch, str):
        raise CheckpointError("meta is missing the architecture identifier")
    return Checkpoint(entries=entries, arch=arch, meta=meta, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
