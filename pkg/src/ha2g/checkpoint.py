"""Binary checkpoint format.

Layout (all integers little-endian): magic "HAG1", version u16, tensor
count u32, then per tensor: name length u16 + UTF-8 name, dtype code u8
(0 = f32), rank u8, dims u32 each, row-major f32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HAG1"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(Exception):
    pass


def write_checkpoint(path, arrays: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.asarray(arr, dtype="<f4")
            if data.ndim:
                data = np.ascontiguousarray(data)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", DTYPE_F32, data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<I", raw[6:10])
    pos = 10
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", raw[pos:pos + 2])
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dtype_code, rank = struct.unpack("<BB", raw[pos:pos + 2])
        pos += 2
        if dtype_code != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
        dims = struct.unpack(f"<{rank}I", raw[pos:pos + 4 * rank])
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(
            raw[pos:pos + 4 * size], dtype="<f4").reshape(dims).copy()
        pos += 4 * size
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return arrays
