"""CUXW parameter checkpoints.

    b"CUXW" | u8 version | u32 n_records
    n_records x ( u16 name_len | name | u8 ndim | ndim x u32 | float32 data )
    u32 meta_len | meta JSON
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"CUXW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    mb = json.dumps(meta or {}, sort_keys=True).encode()
    parts += [struct.pack("<I", len(mb)), mb]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    try:
        version, n = struct.unpack_from("<BI", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 9
        state = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nl].decode()
            pos += 2 + nl
            (nd,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{nd}I", data, pos + 1)
            pos += 1 + 4 * nd
            size = int(np.prod(shape)) * 4
            if pos + size > len(data):
                raise CheckpointError(f"{path}: record {name!r} truncated at offset {pos}")
            state[name] = np.frombuffer(data, "<f4", int(np.prod(shape)), pos).reshape(shape).copy()
            pos += size
        (ml,) = struct.unpack_from("<I", data, pos)
        if pos + 4 + ml != len(data):
            raise CheckpointError(f"{path}: metadata length mismatch at offset {pos}")
        meta = json.loads(data[pos + 4:])
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from None
    return state, meta
