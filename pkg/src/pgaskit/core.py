"""Global pointers, the per-rank runtime, and remote-operation accounting.

Every container in this package talks to remote memory only through a
:class:`Runtime`.  The runtime counts each one-sided call it makes on behalf of
its caller (reads ``R``, writes ``W``, atomics ``A``, barriers ``B``), one tick
per call regardless of payload size, so container costs can be checked against
their best-case operation counts.
"""

from __future__ import annotations

import enum
import operator
import pickle
import struct
import time
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

import numpy as np

from .errors import AllocationError, DeadlockError, UsageError

U8 = np.dtype(np.uint8)
U32 = np.dtype(np.uint32)
U64 = np.dtype(np.uint64)
I64 = np.dtype(np.int64)

# First bytes of every segment are reserved for barrier/collective scratch.
HEADER_SIZE = 64 * 1024
_OFFSET_BITS = 48
_OFFSET_MASK = (1 << _OFFSET_BITS) - 1


class GlobalPtr(NamedTuple):
    """Address of an element in some rank's shared segment.

    Arithmetic moves in units of ``dtype.itemsize``, like a C pointer.  A
    pointer packs into one 64-bit word (:meth:`to_word`) so it can itself be
    stored in global memory; the all-zero word is the null pointer (offset 0
    is always inside the reserved header, never user data).
    """

    rank: int
    offset: int
    dtype: np.dtype = U8

    def __add__(self, k: int) -> "GlobalPtr":  # type: ignore[override]
        return GlobalPtr(self.rank, self.offset + k * self.dtype.itemsize, self.dtype)

    def __sub__(self, k: int) -> "GlobalPtr":
        return GlobalPtr(self.rank, self.offset - k * self.dtype.itemsize, self.dtype)

    @property
    def itemsize(self) -> int:
        return self.dtype.itemsize

    def cast(self, dtype) -> "GlobalPtr":
        return GlobalPtr(self.rank, self.offset, np.dtype(dtype))

    def byte_offset(self, nbytes: int) -> "GlobalPtr":
        return GlobalPtr(self.rank, self.offset + nbytes, self.dtype)

    def to_word(self) -> int:
        return (self.rank << _OFFSET_BITS) | self.offset

    @classmethod
    def from_word(cls, word: int, dtype=U8) -> "GlobalPtr":
        return cls(word >> _OFFSET_BITS, word & _OFFSET_MASK, np.dtype(dtype))

    @property
    def is_null(self) -> bool:
        return self.rank == 0 and self.offset == 0


@dataclass(frozen=True)
class OpCounts:
    """Snapshot of one rank's remote-operation tallies."""

    R: int = 0
    W: int = 0
    A: int = 0
    B: int = 0

    def __sub__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(self.R - other.R, self.W - other.W, self.A - other.A, self.B - other.B)

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(self.R + other.R, self.W + other.W, self.A + other.A, self.B + other.B)

    @property
    def remote(self) -> int:
        """Reads + writes + atomics (barriers excluded)."""
        return self.R + self.W + self.A

    def as_dict(self) -> dict:
        return {"R": self.R, "W": self.W, "A": self.A, "B": self.B}


class HashProm(enum.IntFlag):
    FIND = 1
    INSERT = 2
    LOCAL = 4


class QueueProm(enum.IntFlag):
    PUSH = 1
    POP = 2
    LOCAL = 4


class ConProm:
    """Concurrency promises: which operation kinds may overlap a call.

    Combine with ``|``.  Omitting the argument means every kind may overlap
    (the fully atomic implementation).  Promises are trusted, never checked.
    """

    HashMap = HashProm
    Queue = QueueProm


REDUCE_OPS: dict[str, Callable[[Any, Any], Any]] = {
    "+": operator.add,
    "sum": operator.add,
    "min": min,
    "max": max,
    "|": operator.or_,
    "or": operator.or_,
}


class SegmentAllocator:
    """8-byte aligned bump allocator with size-segregated free lists."""

    def __init__(self, start: int, end: int):
        self.start = start
        self.end = end
        self._top = start
        self._free: dict[int, list[int]] = {}
        self._live: dict[int, int] = {}

    def alloc(self, nbytes: int) -> tuple[int, bool]:
        """Return (offset, reused); ``reused`` regions may hold stale bytes."""
        size = max(8, (nbytes + 7) & ~7)
        bucket = self._free.get(size)
        if bucket:
            off = bucket.pop()
            self._live[off] = size
            return off, True
        if self._top + size > self.end:
            raise AllocationError(
                f"cannot allocate {size} bytes: {self.end - self._top} bytes left in segment"
            )
        off = self._top
        self._top += size
        self._live[off] = size
        return off, False

    def free(self, offset: int) -> int:
        size = self._live.pop(offset, None)
        if size is None:
            raise UsageError(f"offset {offset} is not a live allocation (double free?)")
        self._free.setdefault(size, []).append(offset)
        return size

    @property
    def bytes_in_use(self) -> int:
        return sum(self._live.values())


class Backoff:
    """Bounded exponential backoff (1us -> 1ms) with a deadlock watchdog."""

    __slots__ = ("_rt", "_what", "_delay", "_deadline")

    def __init__(self, rt: "Runtime", what: str):
        self._rt = rt
        self._what = what
        self._delay = 1e-6
        self._deadline = time.monotonic() + rt.watchdog

    def wait(self) -> None:
        self._rt.backend.check_health()
        if time.monotonic() > self._deadline:
            raise DeadlockError(
                f"rank {self._rt.rank}: waited more than {self._rt.watchdog:.1f}s for {self._what}"
            )
        self._rt.backend.wait_hint(self._delay)
        self._delay = min(self._delay * 2, 1e-3)


_INLINE = b"V"
_BLOB = b"P"


class Runtime:
    """One rank's view of the global address space.

    Created by a backend launcher (``threads.spawn_world`` or
    ``socket.spawn_world``); never shared between ranks.
    """

    def __init__(self, backend):
        self.backend = backend
        self.rank: int = backend.rank
        self.nprocs: int = backend.nprocs
        self.segment_size: int = backend.segment_size
        self.watchdog: float = backend.watchdog
        self._heap = SegmentAllocator(HEADER_SIZE, self.segment_size)
        self._R = self._W = self._A = self._B = 0
        self._local = backend.local_segment()

    # -- accounting ---------------------------------------------------------
    def op_counts(self) -> OpCounts:
        return OpCounts(self._R, self._W, self._A, self._B)

    def reset_op_counts(self) -> None:
        self._R = self._W = self._A = self._B = 0

    # -- allocation ---------------------------------------------------------
    def alloc(self, n: int, dtype=U64) -> GlobalPtr:
        dtype = np.dtype(dtype)
        if n < 0:
            raise UsageError("negative allocation count")
        off, reused = self._heap.alloc(n * dtype.itemsize)
        if reused:
            size = self._heap._live[off]
            self._local[off : off + size] = bytes(size)
        return GlobalPtr(self.rank, off, dtype)

    def dealloc(self, ptr: GlobalPtr) -> None:
        if ptr.rank != self.rank:
            raise UsageError(f"rank {self.rank} cannot free memory owned by rank {ptr.rank}")
        self._heap.free(ptr.offset)

    # -- checks -------------------------------------------------------------
    def _check(self, ptr: GlobalPtr, nbytes: int) -> None:
        if not 0 <= ptr.rank < self.nprocs:
            raise UsageError(f"rank {ptr.rank} out of range [0, {self.nprocs})")
        if ptr.offset < 0 or ptr.offset + nbytes > self.segment_size:
            raise UsageError(
                f"access [{ptr.offset}, {ptr.offset + nbytes}) outside segment of {self.segment_size} bytes"
            )

    def _word(self, ptr: GlobalPtr) -> int:
        width = ptr.dtype.itemsize
        if width not in (4, 8):
            raise UsageError(f"atomics need a 32- or 64-bit word, got {width}-byte dtype")
        if ptr.offset % width:
            raise UsageError(f"offset {ptr.offset} not aligned to {width} bytes")
        self._check(ptr, width)
        return width

    # -- one-sided data movement -------------------------------------------
    def rget_bytes(self, ptr: GlobalPtr, nbytes: int) -> bytearray:
        self._check(ptr, nbytes)
        self._R += 1
        return self.backend.read(ptr.rank, ptr.offset, nbytes)

    def rget(self, ptr: GlobalPtr, n: int = 1) -> np.ndarray:
        """Read ``n`` elements; one R regardless of ``n``."""
        data = self.rget_bytes(ptr, n * ptr.dtype.itemsize)
        return np.frombuffer(data, dtype=ptr.dtype, count=n)

    def rput(self, ptr: GlobalPtr, vals) -> None:
        """Start a write of ``vals``; remotely visible after flush or barrier."""
        if isinstance(vals, (bytes, bytearray, memoryview)):
            data = vals
        else:
            data = np.asarray(vals, dtype=ptr.dtype).tobytes()
        self._check(ptr, len(data))
        self._W += 1
        self.backend.write(ptr.rank, ptr.offset, data)

    def flush(self) -> None:
        self.backend.flush()

    def barrier(self) -> None:
        self._B += 1
        self.backend.barrier()

    # -- atomics ------------------------------------------------------------
    def compare_and_swap(self, ptr: GlobalPtr, expected: int, desired: int) -> int:
        width = self._word(ptr)
        self._A += 1
        return self.backend.atomic("cas", width, ptr.rank, ptr.offset, expected, desired)

    def fetch_and_add(self, ptr: GlobalPtr, delta: int) -> int:
        width = self._word(ptr)
        self._A += 1
        return self.backend.atomic("faa", width, ptr.rank, ptr.offset, delta)

    def fetch_and_or(self, ptr: GlobalPtr, bits: int) -> int:
        width = self._word(ptr)
        self._A += 1
        return self.backend.atomic("or", width, ptr.rank, ptr.offset, bits)

    def fetch_and_and(self, ptr: GlobalPtr, bits: int) -> int:
        width = self._word(ptr)
        self._A += 1
        return self.backend.atomic("and", width, ptr.rank, ptr.offset, bits)

    def fetch_and_xor(self, ptr: GlobalPtr, bits: int) -> int:
        width = self._word(ptr)
        self._A += 1
        return self.backend.atomic("xor", width, ptr.rank, ptr.offset, bits)

    def atomic_batch(self, op: str, rank: int, offsets, operands, dtype=U64) -> list[int]:
        """Independent atomics ``op`` on words of ``rank``; one A each.

        The operations may be pipelined by the transport; their relative order
        is unspecified.  ``op`` is one of ``faa or and xor``.
        """
        dtype = np.dtype(dtype)
        width = dtype.itemsize
        if op not in ("faa", "or", "and", "xor"):
            raise UsageError(f"batched atomic must be faa/or/and/xor, got {op!r}")
        offsets = [int(o) for o in offsets]
        for off in offsets:
            self._word(GlobalPtr(rank, off, dtype))
        self._A += len(offsets)
        return self.backend.atomic_many(op, width, rank, offsets, [int(a) for a in operands])

    # -- local (uncounted) access ------------------------------------------
    def is_local(self, ptr: GlobalPtr) -> bool:
        return ptr.rank == self.rank

    @property
    def segment(self) -> bytearray:
        """This rank's own segment, for plain (uncounted, non-atomic) access."""
        return self._local

    def local_view(self, ptr: GlobalPtr, n: int) -> np.ndarray:
        """Writable numpy view of ``n`` elements in this rank's own segment.

        Plain CPU access: not atomic with respect to remote atomics.
        """
        if ptr.rank != self.rank:
            raise UsageError(f"rank {self.rank} has no local view of rank {ptr.rank}'s memory")
        self._check(ptr, n * ptr.dtype.itemsize)
        return np.frombuffer(self._local, dtype=ptr.dtype, count=n, offset=ptr.offset)

    def local_bytes(self, ptr: GlobalPtr, nbytes: int) -> memoryview:
        if ptr.rank != self.rank:
            raise UsageError(f"rank {self.rank} has no local view of rank {ptr.rank}'s memory")
        self._check(ptr, nbytes)
        return memoryview(self._local)[ptr.offset : ptr.offset + nbytes]

    def backoff(self, what: str) -> Backoff:
        return Backoff(self, what)

    # -- collectives --------------------------------------------------------
    def _publish(self, val) -> tuple[bytes, GlobalPtr | None]:
        data = pickle.dumps(val, protocol=pickle.HIGHEST_PROTOCOL)
        if len(data) + 1 <= self.backend.inline_capacity:
            return _INLINE + data, None
        blob = self.alloc(len(data), U8)
        self._local[blob.offset : blob.offset + len(data)] = data
        return _BLOB + struct.pack("<QQ", blob.to_word(), len(data)), blob

    def _fetch(self, msg: bytes):
        if msg[:1] == _INLINE:
            return pickle.loads(msg[1:])
        word, n = struct.unpack_from("<QQ", msg, 1)
        ptr = GlobalPtr.from_word(word)
        if ptr.rank == self.rank:
            return pickle.loads(bytes(self._local[ptr.offset : ptr.offset + n]))
        return pickle.loads(self.backend.read(ptr.rank, ptr.offset, n))

    def broadcast(self, val=None, root: int = 0):
        """Every rank returns ``root``'s value.  Collective."""
        if not 0 <= root < self.nprocs:
            raise UsageError(f"broadcast root {root} out of range")
        msg, blob = self._publish(val) if self.rank == root else (None, None)
        msg = self.backend.broadcast_bytes(msg, root)
        out = val if self.rank == root else self._fetch(msg)
        if blob is not None or msg[:1] == _BLOB:
            self.backend.barrier()
            if blob is not None:
                self.dealloc(blob)
        return out

    def allgather(self, val) -> list:
        """List of every rank's value, indexed by rank.  Collective."""
        msg, blob = self._publish(val)
        msgs = self.backend.allgather_bytes(msg)
        out = [val if r == self.rank else self._fetch(m) for r, m in enumerate(msgs)]
        if any(m[:1] == _BLOB for m in msgs):
            self.backend.barrier()
        if blob is not None:
            self.dealloc(blob)
        return out

    def allreduce(self, val, op="+"):
        """Fold of every rank's value with an associative, commutative ``op``.

        ``op`` is one of ``+ min max |`` or any two-argument callable.
        """
        fn = REDUCE_OPS[op] if isinstance(op, str) else op
        vals = self.allgather(val)
        acc = vals[0]
        for v in vals[1:]:
            acc = fn(acc, v)
        return acc

    def finalize(self) -> None:
        self.backend.finalize()
