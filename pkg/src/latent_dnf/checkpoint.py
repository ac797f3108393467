"""Checkpoint files.

Layout (all integers little-endian)::

    b"DNFCKPT1"  u32 version
    u32 n  + n bytes   config text (UTF-8, key = value lines)
    u32 sections
    per section: u16 name length, name (UTF-8), u64 count, count float64 values

Every piece of training state is stored as a named float64 section, so a
loaded checkpoint resumes a trajectory bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DNFCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    sections: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.sections[name]

    def get(self, name, default=None):
        return self.sections.get(name, default)

    def names(self, prefix=""):
        return [k for k in self.sections if k.startswith(prefix)]


def to_bytes(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(ckpt.sections))]
    for name, values in ckpt.sections.items():
        key = name.encode("utf-8")
        arr = np.ascontiguousarray(np.asarray(values, dtype="<f8").reshape(-1))
        parts += [struct.pack("<H", len(key)), key, struct.pack("<Q", arr.size), arr.tobytes()]
    return b"".join(parts)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = raw[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config_text = take(n).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    sections = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = take(klen).decode("utf-8")
        (size,) = struct.unpack("<Q", take(8))
        sections[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after the last section")
    return Checkpoint(config_text, sections)


def save(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
