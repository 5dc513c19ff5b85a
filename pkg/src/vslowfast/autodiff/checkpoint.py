"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes   b"VSFCKPT\\0"
    version  uint32    currently 1
    count    uint32    number of records
    record * count:
        name_len uint16, name (UTF-8)
        ndim     uint8,  dims uint32 * ndim
        data     float64 * prod(dims), row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VSFCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, array in state.items():
        array = np.asarray(array, dtype="<f8")  # tobytes() is C order; keeps 0-d shapes
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", raw, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos, state = 16, {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            state[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return state
