"""Binary weight checkpoints.

Layout: magic b"GSWT1", then one record per parameter:
u32 name length, utf-8 name, u32 rank, u32 extents, float64 LE values.
Records run to end of file. All integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from gseal.errors import FormatError

__all__ = ["save_weights", "load_weights", "assign_weights", "MAGIC"]

MAGIC = b"GSWT1"


def save_weights(path, params) -> None:
    """Write named parameters in list order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        for p in params:
            name = p.name.encode("utf-8")
            if not name:
                raise FormatError("checkpoint parameters need non-empty names")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("checkpoint truncated")
    return buf


def load_weights(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into {name: float64 array}."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not a GSWT1 checkpoint")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("checkpoint truncated")
            (nlen,) = struct.unpack("<I", head)
            if nlen == 0 or nlen > 4096:
                raise FormatError(f"implausible name length {nlen}")
            name = _read_exact(f, nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            if rank > 8:
                raise FormatError(f"implausible rank {rank} for {name!r}")
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if count > 100_000_000:
                raise FormatError(f"implausible extents {shape} for {name!r}")
            raw = _read_exact(f, 8 * count)
            if name in out:
                raise FormatError(f"duplicate parameter {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def assign_weights(params, loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into matching parameters (by name, shape-checked)."""
    for p in params:
        if p.name not in loaded:
            raise FormatError(f"checkpoint missing parameter {p.name!r}")
        arr = loaded[p.name]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"{p.name!r}: checkpoint shape {arr.shape} vs model {p.data.shape}"
            )
        p.data = arr.copy()
