"""Fixed-capacity bucketed sparse grids with non-manifold addressing.

A grid point may hold up to ``BUCKET_CAPACITY`` independent copies.  A copy is
addressed by a :class:`CopyRef` ``(index1d, bucket_offset)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Generic, Iterator, Sequence, TypeVar

import numpy as np

BUCKET_CAPACITY = 8

T = TypeVar("T")


class GridError(Exception):
    """Base class for structural errors in the grid layer."""


class CapacityError(GridError):
    """Raised when a bucket already holds ``BUCKET_CAPACITY`` copies."""

    def __init__(self, message: str, index1d: int = -1):
        super().__init__(message)
        self.index1d = index1d


class StructuralError(GridError):
    """Raised on malformed parent chains or dangling references."""


@dataclass(frozen=True)
class GridDims:
    nx: int
    ny: int
    nz: int
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    spacing: float = 1.0

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 2:
            raise ValueError("grid needs at least 2 points per axis")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    def position(self, coord) -> np.ndarray:
        """Metric position of integer grid coordinates (any leading shape)."""
        return np.asarray(self.origin) + np.asarray(coord, dtype=float) * self.spacing


@dataclass(frozen=True, order=True)
class CopyRef:
    index1d: int
    bucket_offset: int

    def __post_init__(self):
        if not 0 <= self.bucket_offset < BUCKET_CAPACITY:
            raise ValueError(f"bucket offset {self.bucket_offset} outside [0, {BUCKET_CAPACITY})")


def linear_index(coord, dims: GridDims) -> int:
    x, y, z = (int(c) for c in coord)
    if not (0 <= x < dims.nx and 0 <= y < dims.ny and 0 <= z < dims.nz):
        raise IndexError(f"coordinate {(x, y, z)} outside grid {dims.shape}")
    return x + dims.nx * (y + dims.ny * z)


def unravel_index(index1d: int, dims: GridDims) -> tuple[int, int, int]:
    if not 0 <= index1d < dims.size:
        raise IndexError(f"index {index1d} outside grid of {dims.size} points")
    x = index1d % dims.nx
    rest = index1d // dims.nx
    return (x, rest % dims.ny, rest // dims.ny)


def linear_index_array(coords: np.ndarray, dims: GridDims) -> np.ndarray:
    """Vectorised :func:`linear_index` for an ``(n, 3)`` integer array."""
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (np.any(c < 0) or np.any(c >= np.array(dims.shape))):
        raise IndexError("coordinate outside grid")
    return c[..., 0] + dims.nx * (c[..., 1] + dims.ny * c[..., 2])


@dataclass
class Bucket(Generic[T]):
    slots: list = field(default_factory=lambda: [None] * BUCKET_CAPACITY)
    # offsets handed out since the last compaction; never reused inside a pass
    used: int = 0

    def __len__(self):
        return sum(s is not None for s in self.slots)

    def occupied(self) -> Iterator[tuple[int, T]]:
        for off, value in enumerate(self.slots):
            if value is not None:
                yield off, value


class BucketGrid(Generic[T]):
    """Sparse map ``index1d -> Bucket``; an absent bucket is an inactive point."""

    def __init__(self, dims: GridDims):
        self.dims = dims
        self.buckets: dict[int, Bucket[T]] = {}

    def __contains__(self, index1d: int) -> bool:
        return index1d in self.buckets

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets.values())

    def insert(self, index1d: int, value: T) -> CopyRef:
        if not 0 <= index1d < self.dims.size:
            raise IndexError(f"index {index1d} outside grid")
        bucket = self.buckets.setdefault(index1d, Bucket())
        if bucket.used >= BUCKET_CAPACITY:
            raise CapacityError(
                f"grid point {unravel_index(index1d, self.dims)} already holds "
                f"{BUCKET_CAPACITY} copies; topology update is degenerate"
            )
        off = bucket.used
        bucket.slots[off] = value
        bucket.used += 1
        return CopyRef(index1d, off)

    def get(self, ref: CopyRef) -> T:
        bucket = self.buckets.get(ref.index1d)
        if bucket is None or bucket.slots[ref.bucket_offset] is None:
            raise KeyError(f"no copy at {ref}")
        return bucket.slots[ref.bucket_offset]

    def set(self, ref: CopyRef, value: T) -> None:
        bucket = self.buckets.get(ref.index1d)
        if bucket is None or bucket.slots[ref.bucket_offset] is None:
            raise KeyError(f"no copy at {ref}")
        bucket.slots[ref.bucket_offset] = value

    def remove(self, ref: CopyRef) -> T:
        value = self.get(ref)
        bucket = self.buckets[ref.index1d]
        bucket.slots[ref.bucket_offset] = None
        if len(bucket) == 0:
            del self.buckets[ref.index1d]
        return value

    def copies(self, index1d: int) -> list[tuple[CopyRef, T]]:
        bucket = self.buckets.get(index1d)
        if bucket is None:
            return []
        return [(CopyRef(index1d, off), v) for off, v in bucket.occupied()]

    def items(self) -> Iterator[tuple[CopyRef, T]]:
        for index1d in sorted(self.buckets):
            for off, v in self.buckets[index1d].occupied():
                yield CopyRef(index1d, off), v


def union_find_resolve(parent_ids: Sequence[int]) -> list[int]:
    """Map every element to the root of its class.

    ``parent_ids[i]`` is the parent of ``i``; the root is the element that is
    its own parent, so ``[0, 0, 3, 3]`` resolves to ``[0, 0, 3, 3]``.
    """
    parent = [int(p) for p in parent_ids]
    n = len(parent)
    for i, p in enumerate(parent):
        if not 0 <= p < n:
            raise StructuralError(f"parent {p} of element {i} out of range")

    root = [-1] * n
    for i in range(n):
        if root[i] >= 0:
            continue
        path = []
        seen = set()
        j = i
        while root[j] < 0 and parent[j] != j:
            if j in seen:
                raise StructuralError(f"cyclic parent chain through element {j}")
            seen.add(j)
            path.append(j)
            j = parent[j]
        r = root[j] if root[j] >= 0 else j
        root[j] = r
        for q in path:
            root[q] = r
    return root


class UnionFind:
    """Incremental union-find with path compression; roots are smallest ids."""

    def __init__(self, size: int):
        self.parents = list(range(size))

    def find(self, a: int) -> int:
        root = a
        while root != self.parents[root]:
            root = self.parents[root]
        while a != root:
            self.parents[a], a = root, self.parents[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if ra < rb:
            self.parents[rb] = ra
        else:
            self.parents[ra] = rb
