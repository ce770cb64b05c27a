"""Low-level little-endian binary blocks shared by the file formats.

A "matrix block" is: rows u32, cols u32, then rows*cols raw 32-bit floats
in row-major order.  Strings are u32 byte length + UTF-8 payload.
"""

from __future__ import annotations

import struct

import numpy as np


def write_str(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def read_str(f) -> str:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def write_matrix(f, m: np.ndarray) -> None:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"matrix block must be 2-D, got {m.shape}")
    f.write(struct.pack("<II", m.shape[0], m.shape[1]))
    f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_matrix(f, dtype=np.float64) -> np.ndarray:
    rows, cols = struct.unpack("<II", f.read(8))
    raw = f.read(rows * cols * 4)
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(dtype)


def write_u32(f, x: int) -> None:
    f.write(struct.pack("<I", x))


def read_u32(f) -> int:
    (x,) = struct.unpack("<I", f.read(4))
    return x


def write_u32s(f, xs) -> None:
    xs = list(xs)
    f.write(struct.pack("<I", len(xs)))
    f.write(struct.pack(f"<{len(xs)}I", *xs) if xs else b"")


def read_u32s(f) -> list[int]:
    (n,) = struct.unpack("<I", f.read(4))
    if n == 0:
        return []
    return list(struct.unpack(f"<{n}I", f.read(4 * n)))


def at_eof(f) -> bool:
    pos = f.tell()
    probe = f.read(1)
    if probe:
        f.seek(pos)
        return False
    return True
