"""Named parameter trees and their binary checkpoint format.

Checkpoint layout (little-endian throughout):
    magic "ADVC" | u32 version | u32 entry count
    per entry (lexicographic path order):
        u32 path length | UTF-8 path | u32 rank | u32 dims... | float32 payload
"""

from __future__ import annotations

import struct
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"ADVC"
FORMAT_VERSION = 1


class StructureMismatch(ValueError):
    """Raised when two trees disagree on paths or shapes."""


class ParamTree:
    """Mapping from hierarchical path strings to Tensors.

    Iteration order is deterministic (lexicographic by path).
    """

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._d: dict[str, Tensor] = {}
        if entries:
            for k, v in entries.items():
                self[k] = v

    def __setitem__(self, path: str, value: Tensor) -> None:
        if not isinstance(path, str) or not path:
            raise ValueError(f"invalid parameter path: {path!r}")
        if not isinstance(value, Tensor):
            raise TypeError(f"ParamTree values must be Tensors, got {type(value)}")
        self._d[path] = value

    def __getitem__(self, path: str) -> Tensor:
        return self._d[path]

    def __contains__(self, path: str) -> bool:
        return path in self._d

    def __len__(self) -> int:
        return len(self._d)

    def paths(self) -> list[str]:
        return sorted(self._d)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for p in sorted(self._d):
            yield p, self._d[p]

    def tensors(self) -> Iterator[Tensor]:
        for p in sorted(self._d):
            yield self._d[p]

    def subtree(self, prefix: str) -> "ParamTree":
        """Entries whose path equals `prefix` or starts with `prefix.`."""
        dot = prefix + "."
        return ParamTree({p: t for p, t in self._d.items()
                          if p == prefix or p.startswith(dot)})

    def update(self, other: "ParamTree") -> None:
        for p, t in other.items():
            self[p] = t

    def copy(self) -> "ParamTree":
        return ParamTree({p: t.copy() for p, t in self._d.items()})

    def map(self, fn) -> "ParamTree":
        return ParamTree({p: fn(t) for p, t in self._d.items()})

    def n_params(self) -> int:
        return sum(t.size for t in self._d.values())

    def same_structure(self, other: "ParamTree") -> bool:
        if set(self._d) != set(other._d):
            return False
        return all(self._d[p].shape == other._d[p].shape for p in self._d)

    def assert_same_structure(self, other: "ParamTree") -> None:
        if set(self._d) != set(other._d):
            missing = set(self._d) ^ set(other._d)
            raise StructureMismatch(f"trees differ on paths: {sorted(missing)[:8]}")
        for p in self._d:
            if self._d[p].shape != other._d[p].shape:
                raise StructureMismatch(
                    f"shape mismatch at {p}: {self._d[p].shape} vs {other._d[p].shape}")

    def __repr__(self):
        return f"ParamTree({len(self._d)} entries, {self.n_params()} params)"


def save_param_tree(tree: ParamTree, path: str) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tree)))
        for p, t in tree.items():
            arr = np.ascontiguousarray(t.data, dtype=np.float32)
            enc = p.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_param_tree(path: str) -> ParamTree:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tree = ParamTree()
    for _ in range(count):
        (plen,) = struct.unpack_from("<I", raw, off)
        off += 4
        p = raw[off:off + plen].decode("utf-8")
        off += plen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tree[p] = Tensor(arr.astype(np.float32))
    return tree
