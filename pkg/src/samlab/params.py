"""Flat parameter vectors with a named-tensor layout.

A ParamVector stores all trainable tensors of a model concatenated into one
1-D float64 array plus a layout table mapping each tensor name to its shape
and offset. Optimizers work on the flat view; models read named views.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


class ParamLayout:
    """Ordered, contiguous, non-overlapping table of named tensor slots."""

    def __init__(self, entries: list[LayoutEntry]):
        offset = 0
        seen: set[str] = set()
        for e in entries:
            if e.name in seen:
                raise ValueError(f"duplicate tensor name {e.name!r}")
            if e.offset != offset:
                raise ValueError(
                    f"layout entry {e.name!r} at offset {e.offset}, expected {offset}"
                )
            seen.add(e.name)
            offset += e.size
        self.entries = tuple(entries)
        self.size = offset
        self._by_name = {e.name: e for e in entries}

    @classmethod
    def from_shapes(cls, named_shapes: list[tuple[str, tuple[int, ...]]]) -> "ParamLayout":
        entries, offset = [], 0
        for name, shape in named_shapes:
            e = LayoutEntry(name, tuple(int(s) for s in shape), offset)
            entries.append(e)
            offset += e.size
        return cls(entries)

    def entry(self, name: str) -> LayoutEntry:
        return self._by_name[name]

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamLayout) and self.entries == other.entries

    def __repr__(self) -> str:
        inner = ", ".join(f"{e.name}:{e.shape}" for e in self.entries)
        return f"ParamLayout({inner}, size={self.size})"


class ParamVector:
    """Flat float64 parameter vector bound to a ParamLayout."""

    __slots__ = ("data", "layout")

    def __init__(self, data: np.ndarray, layout: ParamLayout, *, check_finite: bool = True):
        data = np.asarray(data, dtype=np.float64).reshape(-1)
        if data.size != layout.size:
            raise ValueError(f"data has {data.size} entries, layout expects {layout.size}")
        if check_finite and not np.isfinite(data).all():
            bad = [e.name for e in layout.entries
                   if not np.isfinite(data[e.offset:e.offset + e.size]).all()]
            raise ValueError(f"non-finite entries in tensors {bad}")
        self.data = data
        self.layout = layout

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "ParamVector":
        return cls(np.zeros(layout.size), layout)

    def view(self, name: str) -> np.ndarray:
        """Writable view of one named tensor, reshaped to its layout shape."""
        e = self.layout.entry(name)
        return self.data[e.offset:e.offset + e.size].reshape(e.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout, check_finite=False)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def dot(self, other: "ParamVector") -> float:
        return float(self.data @ other.data)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return ParamVector(self.data + other.data, self.layout, check_finite=False)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return ParamVector(self.data - other.data, self.layout, check_finite=False)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.data * float(scalar), self.layout, check_finite=False)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.data, self.layout, check_finite=False)

    def __len__(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"ParamVector(d={self.data.size}, norm={np.linalg.norm(self.data):.4g})"
