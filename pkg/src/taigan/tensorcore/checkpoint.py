"""TGW1 weight files.

Layout (little-endian): magic ``b"TGW1"``, u32 parameter count, then per
parameter: u16 name length, UTF-8 name, u8 rank, u32 extent per axis, raw
float64 data in C order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TGW1"


class CheckpointError(ValueError):
    pass


def dump_weights(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {arr.ndim} does not fit in u8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def load_weights_bytes(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a TGW1 weight file (bad magic)")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 8 * n > len(buf):
                raise CheckpointError(f"{name}: truncated data")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated TGW1 file: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last parameter")
    return out


def save_weights(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_weights(params))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    return load_weights_bytes(Path(path).read_bytes())
