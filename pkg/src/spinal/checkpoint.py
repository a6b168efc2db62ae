"""Binary checkpoints.

Layout (all integers little-endian)::

    b"SPINAL1"
    u32 metadata length, UTF-8 JSON metadata
    u32 array count
    per array: u16 name length, name, u8 ndim, u32 dims..., float64 data
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SPINAL1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix`` (e.g. ``"low."``) with the prefix stripped."""
        out = {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}
        if not out:
            raise CheckpointError(f"checkpoint has no {prefix.rstrip('.')!r} section")
        return out

    def sections(self) -> list[str]:
        return sorted({k.split(".", 1)[0] for k in self.arrays})

    def to_bytes(self) -> bytes:
        parts = [MAGIC]
        meta = json.dumps(self.meta, sort_keys=True).encode()
        parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(self.arrays))]
        for name, arr in self.arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise CheckpointError(f"array {name!r} has non-finite values")
            enc = name.encode()
            parts += [struct.pack("<H", len(enc)), enc, struct.pack("<B", arr.ndim),
                      struct.pack(f"<{arr.ndim}I", *arr.shape), arr.astype("<f8").tobytes()]
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(MAGIC) + 12 or not data.startswith(MAGIC):
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("checkpoint checksum mismatch")
        try:
            pos = len(MAGIC)
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            meta = json.loads(body[pos:pos + n].decode())
            pos += n
            (count,) = struct.unpack_from("<I", body, pos)
            pos += 4
            arrays = {}
            for _ in range(count):
                (ln,) = struct.unpack_from("<H", body, pos)
                pos += 2
                name = body[pos:pos + ln].decode()
                pos += ln
                (ndim,) = struct.unpack_from("<B", body, pos)
                pos += 1
                shape = struct.unpack_from(f"<{ndim}I", body, pos)
                pos += 4 * ndim
                size = int(np.prod(shape, dtype=np.int64))
                arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos)
                arrays[name] = arr.astype(np.float64).reshape(shape)
                pos += 8 * size
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc
        if pos != len(body):
            raise CheckpointError("malformed checkpoint: trailing bytes")
        return cls(meta, arrays)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    data = Checkpoint(dict(meta or {}), dict(arrays)).to_bytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())


def assign(params: dict, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy ``arrays`` into parameter tensors of matching name and shape."""
    missing = sorted(set(params) - set(arrays))
    if strict and missing:
        raise CheckpointError(f"checkpoint is missing arrays: {', '.join(missing)}")
    for name, arr in arrays.items():
        if name not in params:
            if strict:
                raise CheckpointError(f"unexpected array {name!r} in checkpoint")
            continue
        p = params[name]
        if p.shape != arr.shape:
            raise CheckpointError(
                f"array {name!r} has shape {arr.shape}, architecture expects {p.shape}")
        p.value = np.array(arr, dtype=np.float64)
