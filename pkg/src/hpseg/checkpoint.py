"""Binary checkpoint container.

Layout: magic "HPSK1", then a length-prefixed UTF-8 config echo (key=value
text), then parameter records until EOF. Record: u32 name length, name bytes,
one dtype tag byte (0x01 = float32), u8 rank, u32 dims, raw little-endian
float32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

MAGIC = b"HPSK1"
DTYPE_F32 = 0x01


class CheckpointError(DataError):
    pass


def save(path, config_echo: str, params) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        echo = config_echo.encode("utf-8")
        fh.write(struct.pack("<I", len(echo)))
        fh.write(echo)
        for p in params:
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read(path) -> tuple[str, dict[str, np.ndarray]]:
    """Return (config echo, name -> float32 array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = 5

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    (echo_len,) = struct.unpack("<I", take(4))
    echo = take(echo_len).decode("utf-8")
    weights: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag != DTYPE_F32:
            raise CheckpointError(f"{path}: unsupported dtype tag {tag} for '{name}'")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = take(4 * count)
        if name in weights:
            raise CheckpointError(f"{path}: duplicate parameter '{name}'")
        weights[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return echo, weights
