"""Versioned little-endian checkpoint container.

Layout: magic ``SDCK``, u32 version, u32 config-length, config UTF-8 bytes
(the RunConfig snapshot), then named tensor blocks until EOF. Each block is
u32 name-length, name bytes, u32 rank, u32 dims, float32 data. All tensors
round-trip as float32, so inference from a loaded checkpoint is reproducible
bit for bit.
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDCK"
VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint"]


def save_checkpoint(path, tensors: dict, config_text: str):
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    path.write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns (tensors dict of float32 arrays, config_text)."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic, not an SDCK checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 8)
    off = 12
    config_text = blob[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    tensors = {}
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        tensors[name] = arr.copy()
    return tensors, config_text
