"""TDCK checkpoint container: named float32 tensors in one little-endian file.

Layout: ``b"TDCK"``, u32 version, u32 tensor count, then per tensor a u16
name length, the UTF-8 name, a u8 rank, u32 dims and the raw float32
payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

MAGIC = b"TDCK"
VERSION = 1


def save(path, tensors):
    """Write ``{name: array}`` in insertion order."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContractError(f"tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path):
    """Read a container back into an ordered ``{name: float32 array}``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a TDCK checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def state_of(prefix, named_params):
    return {f"{prefix}{n}": p.data for n, p in named_params}


def load_into(named_params, tensors, prefix=""):
    """Copy checkpoint tensors into parameters, checking names and shapes."""
    for n, p in named_params:
        key = f"{prefix}{n}"
        if key not in tensors:
            raise ContractError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != p.shape:
            raise ContractError(
                f"shape mismatch for {key!r}: checkpoint {tensors[key].shape} vs model {p.shape}")
        p.data[...] = tensors[key]
