"""Backend contract shared by the threads and socket transports.

A backend supplies raw byte reads/writes, word atomics and its own segment.
Barriers and byte collectives are built here on top of those primitives, over
a fixed header at the start of rank 0's segment, so every backend gets the
same algorithms:

* barrier: centralized sense-reversing counter (FAA + polling of a sense word)
* broadcast: root writes into its header, barrier, others read, barrier
* allgather: each rank writes a slot in rank 0's header, barrier, read, barrier
"""

from __future__ import annotations

import abc
import pickle
import struct
import time

from ..core import HEADER_SIZE, REDUCE_OPS
from ..errors import DeadlockError, UsageError

_BAR_COUNT = 0
_BAR_SENSE = 8
_BCAST = 64
_BCAST_CAP = 8192
_GATHER = 16384
_SLOT = 512
MAX_RANKS = (HEADER_SIZE - _GATHER) // _SLOT

ATOMIC_OPS = ("cas", "faa", "or", "and", "xor")
_MASKS = {4: (1 << 32) - 1, 8: (1 << 64) - 1}
_WORD = {4: struct.Struct("<I"), 8: struct.Struct("<Q")}


def apply_atomic(op: str, cur: int, a: int, b: int, mask: int) -> int:
    """New word value after ``op``; ``cur`` is the prior value."""
    if op == "cas":
        return b & mask if cur == (a & mask) else cur
    if op == "faa":
        return (cur + a) & mask
    if op == "or":
        return cur | (a & mask)
    if op == "and":
        return cur & a & mask
    if op == "xor":
        return cur ^ (a & mask)
    raise UsageError(f"unknown atomic op {op!r}")


def atomic_on_buffer(buf, op: str, width: int, offset: int, a: int, b: int = 0) -> int:
    """Apply ``op`` to the word at ``buf[offset]`` and return the prior value.

    Callers hold whatever lock makes this atomic.
    """
    word = _WORD[width]
    cur = word.unpack_from(buf, offset)[0]
    new = apply_atomic(op, cur, a, b, _MASKS[width])
    if new != cur:
        word.pack_into(buf, offset, new)
    return cur


class Backend(abc.ABC):
    """Transport for one rank.

    Subclasses implement :meth:`read`, :meth:`write`, :meth:`_native_atomic`
    and :meth:`local_segment`.  Atomic kinds missing from
    ``native_atomics`` are synthesized from compare-and-swap.
    """

    native_atomics: frozenset = frozenset(ATOMIC_OPS)
    inline_capacity = _SLOT - 8

    def __init__(self, rank: int, nprocs: int, segment_size: int, watchdog: float = 10.0):
        if nprocs < 1:
            raise UsageError("nprocs must be >= 1")
        if nprocs > MAX_RANKS:
            raise UsageError(f"at most {MAX_RANKS} ranks are supported")
        if segment_size < HEADER_SIZE + 8:
            raise UsageError(f"segment_size must exceed the {HEADER_SIZE}-byte header")
        self.rank = rank
        self.nprocs = nprocs
        self.segment_size = segment_size
        self.watchdog = watchdog
        self._sense = 0

    # -- primitives supplied by subclasses ----------------------------------
    @abc.abstractmethod
    def read(self, rank: int, offset: int, nbytes: int) -> bytearray: ...

    @abc.abstractmethod
    def write(self, rank: int, offset: int, data) -> None: ...

    @abc.abstractmethod
    def _native_atomic(self, op: str, width: int, rank: int, offset: int, a: int, b: int) -> int: ...

    @abc.abstractmethod
    def local_segment(self) -> bytearray: ...

    def flush(self) -> None:
        """Writes complete before returning in both transports, so nothing is pending."""

    def check_health(self) -> None:
        """Raise if the world can no longer make progress."""

    def wait_hint(self, delay: float) -> None:
        time.sleep(delay)

    def notify_barrier(self) -> None:
        """Called by the last rank to reach a barrier, after releasing it."""

    def finalize(self) -> None:
        self.barrier()

    # -- atomics ------------------------------------------------------------
    def atomic(self, op: str, width: int, rank: int, offset: int, a: int, b: int = 0) -> int:
        if op in self.native_atomics:
            return self._native_atomic(op, width, rank, offset, a, b)
        if op == "cas":
            raise UsageError("backends must provide compare-and-swap natively")
        # CAS retry loop; the caller still sees a single atomic operation.
        mask = _MASKS[width]
        cur = self._native_atomic("cas", width, rank, offset, 0, 0)
        while True:
            new = apply_atomic(op, cur, a, b, mask)
            prior = self._native_atomic("cas", width, rank, offset, cur, new)
            if prior == cur:
                return prior
            cur = prior

    def atomic_many(self, op: str, width: int, rank: int, offsets: list, operands: list) -> list:
        """Prior values of independent atomics on one rank; transports may pipeline them."""
        return [self.atomic(op, width, rank, off, a) for off, a in zip(offsets, operands)]

    # -- synchronization ----------------------------------------------------
    def _spin(self, done, what: str) -> None:
        delay = 1e-6
        deadline = time.monotonic() + self.watchdog
        while not done():
            self.check_health()
            if time.monotonic() > deadline:
                raise DeadlockError(f"rank {self.rank}: waited more than {self.watchdog:.1f}s for {what}")
            self.wait_hint(delay)
            delay = min(delay * 2, 1e-3)

    def barrier(self) -> None:
        self.flush()
        if self.nprocs == 1:
            return
        self._sense ^= 1
        sense = self._sense
        arrived = self.atomic("faa", 8, 0, _BAR_COUNT, 1)
        if arrived == self.nprocs - 1:
            self.write(0, _BAR_COUNT, bytes(8))
            self.write(0, _BAR_SENSE, struct.pack("<Q", sense))
            self.notify_barrier()
        else:
            probe = _WORD[8]
            self._spin(lambda: probe.unpack(self.read(0, _BAR_SENSE, 8))[0] == sense, "barrier")

    # -- byte collectives ---------------------------------------------------
    def broadcast_bytes(self, data: bytes | None, root: int) -> bytes:
        if self.rank == root:
            if len(data) > _BCAST_CAP:
                raise UsageError(f"broadcast payload of {len(data)} bytes exceeds {_BCAST_CAP}")
            self.write(root, _BCAST, struct.pack("<Q", len(data)) + data)
        self.barrier()
        if self.rank != root:
            n = struct.unpack(b"<Q", self.read(root, _BCAST, 8))[0]
            data = bytes(self.read(root, _BCAST + 8, n))
        self.barrier()
        return data

    def allgather_bytes(self, data: bytes) -> list[bytes]:
        if len(data) > _SLOT - 8:
            raise UsageError(f"gather payload of {len(data)} bytes exceeds {_SLOT - 8}")
        self.write(0, _GATHER + self.rank * _SLOT, struct.pack("<Q", len(data)) + data)
        self.barrier()
        raw = self.read(0, _GATHER, self.nprocs * _SLOT)
        self.barrier()
        out = []
        for r in range(self.nprocs):
            base = r * _SLOT
            n = struct.unpack_from("<Q", raw, base)[0]
            out.append(bytes(raw[base + 8 : base + 8 + n]))
        return out

    def broadcast(self, val, root: int = 0):
        data = pickle.dumps(val) if self.rank == root else None
        return pickle.loads(self.broadcast_bytes(data, root))

    def allreduce(self, val, op):
        fn = REDUCE_OPS[op] if isinstance(op, str) else op
        vals = [pickle.loads(m) for m in self.allgather_bytes(pickle.dumps(val))]
        acc = vals[0]
        for v in vals[1:]:
            acc = fn(acc, v)
        return acc
