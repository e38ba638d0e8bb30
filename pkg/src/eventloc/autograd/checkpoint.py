"""Binary checkpoint format.

Layout (little-endian)::

    b"LEARCKPT"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 JSON (channel config, iteration count, ...)
    repeated: u32 name_len, name (UTF-8), u32 rank, rank x u64 extents, f32 values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import ModelWeights

MAGIC = b"LEARCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_weights(weights: ModelWeights, path) -> None:
    meta = json.dumps(weights.meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name, t in weights.params.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_weights(path) -> ModelWeights:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", buf, 12)
    pos = 16
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    weights = ModelWeights(meta=meta)
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        weights.add(name, values.astype(np.float32))
    return weights
