"""Named trainable parameters with paired gradient and Adam state.

All stored arrays are 2-D (kernels live flattened as (k*cin, cout)); the
on-disk format is a little-endian binary with a "DGUW" magic, see
`save_weights`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine

WEIGHT_MAGIC = b"DGUW"
WEIGHT_VERSION = 1


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray


@dataclass
class ParamStore:
    dtype: np.dtype = np.float64
    entries: dict[str, ParamEntry] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = np.ascontiguousarray(np.asarray(value, dtype=self.dtype))
        if v.ndim != 2:
            raise ValueError(f"parameter {name!r} must be 2-D, got shape {v.shape}")
        self.entries[name] = ParamEntry(v, np.zeros_like(v), np.zeros_like(v), np.zeros_like(v))

    def value(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def values(self) -> dict[str, np.ndarray]:
        return {k: e.value for k, e in self.entries.items()}

    def leaves(self) -> dict[str, engine.Node]:
        """Fresh leaf Nodes for one forward/backward pass."""
        return {k: engine.leaf(e.value) for k, e in self.entries.items()}

    def accumulate(self, name: str, grad) -> None:
        g = np.asarray(engine.val(grad), dtype=self.dtype)
        e = self.entries[name]
        if g.shape != e.value.shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {e.value.shape} for {name!r}")
        e.grad += g

    def zero_grads(self) -> None:
        for e in self.entries.values():
            e.grad[...] = 0.0

    def state_hash(self) -> int:
        """Order-stable hash of all parameter bytes (alternation checks)."""
        h = 0
        for name in sorted(self.entries):
            h = hash((h, name, self.entries[name].value.tobytes()))
        return h


def adam_step(store: ParamStore, lr: float, beta1: float = 0.5, beta2: float = 0.98, eps: float = 1e-8) -> ParamStore:
    """Standard Adam with bias correction; zeroes gradients afterwards."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for e in store.entries.values():
        e.adam_m[...] = beta1 * e.adam_m + (1.0 - beta1) * e.grad
        e.adam_v[...] = beta2 * e.adam_v + (1.0 - beta2) * np.square(e.grad)
        e.value[...] -= lr * (e.adam_m / bc1) / (np.sqrt(e.adam_v / bc2) + eps)
        e.grad[...] = 0.0
    return store


def save_weights(path, store: ParamStore) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(store.entries)))
        for name, e in store.entries.items():
            nb = name.encode("utf-8")
            rows, cols = e.value.shape
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<II", rows, cols))
            f.write(np.ascontiguousarray(e.value, dtype="<f4").tobytes())


def load_weights(path, dtype=np.float64) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHT_MAGIC:
            raise ValueError(f"{path}: not a weight file (bad magic {magic!r})")
        version, count = struct.unpack("<II", f.read(8))
        if version != WEIGHT_VERSION:
            raise ValueError(f"{path}: unsupported weight format version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            rows, cols = struct.unpack("<II", f.read(8))
            raw = f.read(rows * cols * 4)
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(dtype)
    return out


def store_from_weights(weights: dict[str, np.ndarray], dtype=np.float64) -> ParamStore:
    store = ParamStore(dtype=np.dtype(dtype))
    for name, v in weights.items():
        store.add(name, v)
    return store
