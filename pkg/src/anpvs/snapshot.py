"""Binary weight snapshots.

Layout (little-endian)::

    b"ANPW"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u32 rank, rank x u32 dims, f64 values }

Mask and VIB parameters travel as extra arrays named ``<layer>.mask.a``,
``<layer>.mask.b``, ``<layer>.vib.mu`` and ``<layer>.vib.sigma``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ANPW"
VERSION = 1


def encode_snapshot(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        values = np.asarray(arrays[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape))
        parts.append(values.tobytes(order="C"))
    return b"".join(parts)


def decode_snapshot(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise FormatError(f"not a weight snapshot (magic {raw[:4]!r})")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise OSError("truncated weight snapshot")
        out = struct.unpack_from(fmt, raw, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != VERSION:
        raise FormatError(f"unsupported snapshot version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(raw):
            raise OSError("truncated weight snapshot")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 8 * n > len(raw):
            raise OSError(f"truncated weight snapshot in {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after snapshot")
    return arrays


def save_snapshot(arrays: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_snapshot(arrays))


def load_snapshot(path) -> dict[str, np.ndarray]:
    return decode_snapshot(Path(path).read_bytes())


def save_model(model, path) -> None:
    save_snapshot(model.state_dict(), path)


def load_model_state(model, path, strict: bool = True) -> None:
    model.load_state_dict(load_snapshot(path), strict=strict)
