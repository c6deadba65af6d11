"""One-dimensional arrays: block-distributed (:class:`DArray`) and hosted (:class:`Array`)."""

from __future__ import annotations

import numpy as np

from .core import U8, GlobalPtr, Runtime
from .errors import UsageError
from .serialize import ObjectContainer


class _CellArray:
    def __init__(self, rt: Runtime, length: int, value_type):
        if length < 0:
            raise UsageError("array length must be non-negative")
        self.rt = rt
        self.length = length
        self.cells = ObjectContainer(value_type)
        self.cell_size = self.cells.size

    def __len__(self) -> int:
        return self.length

    def _check(self, i: int) -> None:
        if not 0 <= i < self.length:
            raise UsageError(f"index {i} out of range for array of length {self.length}")

    def ptr(self, i: int) -> GlobalPtr:
        raise NotImplementedError

    def get(self, i: int):
        self._check(i)
        return self.cells.get(self.rt, self.ptr(i))

    def put(self, i: int, value) -> None:
        self._check(i)
        self.cells.set(self.rt, self.ptr(i), value)

    __getitem__ = get
    __setitem__ = put


class DArray(_CellArray):
    """Element ``i`` lives on rank ``i // ceil(length / nprocs)``.  Construction is collective."""

    def __init__(self, rt: Runtime, length: int, value_type=int):
        super().__init__(rt, length, value_type)
        self.block = max(1, -(-length // rt.nprocs))
        lo, hi = self.local_range(rt.rank)
        self._mine = rt.alloc(max(1, hi - lo) * self.cell_size, U8)
        self._bases = rt.allgather(self._mine.offset)

    def owner(self, i: int) -> int:
        return i // self.block

    def local_range(self, rank: int) -> tuple[int, int]:
        lo = min(self.length, rank * self.block)
        return lo, min(self.length, lo + self.block)

    def ptr(self, i: int) -> GlobalPtr:
        rank = i // self.block
        return GlobalPtr(rank, self._bases[rank] + (i - rank * self.block) * self.cell_size, U8)

    def local_view(self) -> np.ndarray:
        """Numpy view of this rank's block (byte-copyable element types only)."""
        ser = self.cells.ser
        if not ser.identity:
            raise UsageError("local_view needs a byte-copyable element type")
        lo, hi = self.local_range(self.rt.rank)
        arr = np.frombuffer(self.rt.segment, dtype=ser.cell_dtype, count=hi - lo, offset=self._mine.offset)
        return arr if ser.cell_dtype is ser.dtype else arr["v"]

    def read_all(self):
        """Whole array, one read per rank holding elements."""
        out = []
        for r in range(self.rt.nprocs):
            lo, hi = self.local_range(r)
            if hi > lo:
                out.append(self.cells.get_many(self.rt, self.ptr(lo), hi - lo))
        if self.cells.ser.identity:
            return np.concatenate(out) if out else self.cells.decode_cells(self.rt, b"", 0)
        return [v for part in out for v in part]


class Array(_CellArray):
    """Array held entirely by ``host``.  Construction is collective."""

    def __init__(self, rt: Runtime, length: int, host: int = 0, value_type=int):
        super().__init__(rt, length, value_type)
        if not 0 <= host < rt.nprocs:
            raise UsageError(f"host rank {host} out of range")
        self.host = host
        off = rt.alloc(max(1, length) * self.cell_size, U8).offset if rt.rank == host else None
        self._base = GlobalPtr(host, rt.broadcast(off, host), U8)

    def ptr(self, i: int) -> GlobalPtr:
        return self._base.byte_offset(i * self.cell_size)

    def read_all(self):
        return self.cells.get_many(self.rt, self._base, self.length)
