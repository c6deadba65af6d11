"""Hosted ring-buffer queues.

Both queues live in one host rank's segment and are reachable by every rank.
Positions are monotone 64-bit counters; the slot of position ``p`` is
``p % capacity``.

:class:`FastQueue` supports concurrent pushes *or* concurrent pops, with the
two kinds separated by a barrier.  :class:`CircularQueue` adds a second pair
of "ready" counters so pushes and pops may overlap.
"""

from __future__ import annotations


import numpy as np

from .core import U8, U64, GlobalPtr, QueueProm, Runtime
from .errors import CapacityError, UsageError
from .serialize import ObjectContainer

_DEFAULT = QueueProm.PUSH | QueueProm.POP
# control words
HEAD, TAIL, HEAD_READY, TAIL_READY = 0, 1, 2, 3


class _HostedRing:
    """Storage and collective maintenance shared by both queues."""

    def __init__(self, rt: Runtime, host: int, capacity: int, value_type=int):
        if not 0 <= host < rt.nprocs:
            raise UsageError(f"host rank {host} out of range")
        if capacity < 1:
            raise UsageError("queue capacity must be positive")
        self.rt = rt
        self.cells = ObjectContainer(value_type)
        self.cell_size = self.cells.size
        self.host = host
        self.capacity = capacity
        ptrs = None
        if rt.rank == host:
            ptrs = self._alloc(capacity)
        self._set(*rt.broadcast(ptrs, host))

    def _alloc(self, capacity: int) -> tuple[int, int]:
        data = self.rt.alloc(capacity * self.cell_size, U8)
        ctrl = self.rt.alloc(4, U64)
        return data.offset, ctrl.offset

    def _set(self, data_off: int, ctrl_off: int) -> None:
        self.data = GlobalPtr(self.host, data_off, U8)
        self.ctrl = GlobalPtr(self.host, ctrl_off, U64)
        self._reset_caches()

    def _reset_caches(self) -> None:
        pass

    def _word(self, which: int) -> GlobalPtr:
        return self.ctrl + which

    def _give_back(self, which: int, end: int, keep: int) -> None:
        """Shrink a claim ``[.., end)`` on counter ``which`` to end at ``keep``.

        Only the latest claim may shrink the counter.  Every claim made after
        an overflowing one overflows too, so those give back first and the
        counter returns to ``end``.  A blind negative add could instead drop
        the counter below a claim that succeeded in between.
        """
        ptr = self._word(which)
        wait = None
        while self.rt.compare_and_swap(ptr, end, keep) != end:
            if wait is None:
                wait = self.rt.backoff("queue give-back")
            wait.wait()

    @property
    def is_host(self) -> bool:
        return self.rt.rank == self.host

    # -- transfers ----------------------------------------------------------
    def _spans(self, pos: int, n: int):
        """(slot, count) runs covering positions [pos, pos+n)."""
        slot = pos % self.capacity
        first = min(n, self.capacity - slot)
        yield slot, first
        if first < n:
            yield 0, n - first

    def _write(self, pos: int, data: bytes, n: int) -> None:
        cs = self.cell_size
        done = 0
        for slot, cnt in self._spans(pos, n):
            self.rt.rput(self.data.byte_offset(slot * cs), data[done * cs : (done + cnt) * cs])
            done += cnt

    def _read(self, pos: int, n: int):
        cs = self.cell_size
        parts = [self.rt.rget_bytes(self.data.byte_offset(slot * cs), cnt * cs)
                 for slot, cnt in self._spans(pos, n)]
        data = parts[0] if len(parts) == 1 else b"".join(parts)
        return self.cells.decode_cells(self.rt, data, n)

    def _local_counters(self) -> np.ndarray:
        return self.rt.local_view(self.ctrl, 4)

    def _local_slots(self) -> memoryview:
        return self.rt.local_bytes(self.data, self.capacity * self.cell_size)

    def _host_only(self, what: str) -> None:
        if not self.is_host:
            raise UsageError(f"{what} is only available on the host rank {self.host}")

    def _local_write(self, pos: int, data: bytes, n: int) -> None:
        slots = self._local_slots()
        cs = self.cell_size
        done = 0
        for slot, cnt in self._spans(pos, n):
            slots[slot * cs : (slot + cnt) * cs] = data[done * cs : (done + cnt) * cs]
            done += cnt

    def _local_raw(self, pos: int, n: int) -> bytes:
        if n == 0:
            return b""
        slots = self._local_slots()
        cs = self.cell_size
        return b"".join(bytes(slots[slot * cs : (slot + cnt) * cs]) for slot, cnt in self._spans(pos, n))

    def _local_read(self, pos: int, n: int):
        return self.cells.decode_cells(self.rt, self._local_raw(pos, n), n)

    # -- inspection ---------------------------------------------------------
    def size(self) -> int:
        """Live elements (tail - head).  One read of the control words."""
        c = self.rt.rget(self.ctrl, 4)
        return int(c[TAIL]) - int(c[HEAD])

    def as_vector(self):
        """Copy of the live contents, oldest first."""
        if self.is_host:
            c = self._local_counters()
            head, tail = int(c[HEAD]), int(c[TAIL])
            return self._local_read(head, tail - head) if tail > head else self._empty()
        c = self.rt.rget(self.ctrl, 4)
        head, tail = int(c[HEAD]), int(c[TAIL])
        return self._read(head, tail - head) if tail > head else self._empty()

    def _empty(self):
        return self.cells.decode_cells(self.rt, b"", 0)

    # -- collective maintenance --------------------------------------------
    def _live(self):
        c = self._local_counters()
        head, tail = int(c[HEAD]), int(c[TAIL])
        return head, tail - head

    def resize(self, new_capacity: int) -> None:
        """Reallocate on the host, compacting live elements to the front.  Collective."""
        rt = self.rt
        if new_capacity < 1:
            raise UsageError("queue capacity must be positive")
        ptrs = None
        if self.is_host:
            head, live = self._live()
            if live <= new_capacity:
                raw = self._local_raw(head, live)
                old_data, old_ctrl = self.data, self.ctrl
                self.capacity = new_capacity
                data_off, ctrl_off = self._alloc(new_capacity)
                rt.segment[data_off : data_off + len(raw)] = raw
                rt.local_view(GlobalPtr(self.host, ctrl_off, U64), 4)[:] = (0, live, 0, live)
                rt.dealloc(old_data)
                rt.dealloc(old_ctrl)
                ptrs = (data_off, ctrl_off, live)
            else:
                ptrs = (None, None, live)
        data_off, ctrl_off, live = rt.broadcast(ptrs, self.host)
        if data_off is None:
            raise CapacityError(f"cannot resize queue to {new_capacity}: it holds {live} elements")
        self.capacity = new_capacity
        self._set(data_off, ctrl_off)

    def migrate(self, new_host: int) -> None:
        """Move the queue to ``new_host``'s segment.  Collective."""
        rt = self.rt
        if not 0 <= new_host < rt.nprocs:
            raise UsageError(f"host rank {new_host} out of range")
        if new_host == self.host:
            rt.barrier()
            return
        ptrs = self._alloc(self.capacity) if rt.rank == new_host else None
        data_off, ctrl_off = rt.broadcast(ptrs, new_host)
        if self.is_host:
            head, live = self._live()
            if live:
                rt.rput(GlobalPtr(new_host, data_off, U8), self._local_raw(head, live))
            rt.rput(GlobalPtr(new_host, ctrl_off, U64), np.array([0, live, 0, live], dtype=np.uint64))
            rt.flush()
            rt.dealloc(self.data)
            rt.dealloc(self.ctrl)
        rt.barrier()
        self.host = new_host
        self._set(data_off, ctrl_off)


class FastQueue(_HostedRing):
    """Ring buffer for phases of concurrent pushes or concurrent pops.

    Pushes reserve space with one fetch-and-add on the tail, pops with one
    on the head.  Pushes and pops must be separated by a barrier.  Each rank
    caches the last head and tail it learned, refreshing them with a read
    only when the cached value would make the operation fail.
    """

    def _reset_caches(self) -> None:
        self._c_head = 0
        self._c_tail = 0

    def push(self, vals) -> bool:
        """Append ``vals`` (a sequence); False and no effect when there is no room."""
        n = len(vals)
        if n == 0:
            return True
        if n > self.capacity:
            return False
        return self.push_encoded(self.cells.encode_cells(self.rt, vals), n)

    def push_encoded(self, data: bytes, n: int) -> bool:
        """Push ``n`` already-encoded cells (``n * cell_size`` bytes)."""
        if n == 0:
            return True
        if n > self.capacity:
            return False
        rt = self.rt
        tail = self._word(TAIL)
        t = rt.fetch_and_add(tail, n)
        if t + n - self._c_head > self.capacity:
            self._c_head = int(rt.rget(self._word(HEAD))[0])
            if t + n - self._c_head > self.capacity:
                self._give_back(TAIL, t + n, t)
                return False
        self._write(t, data, n)
        self._c_tail = max(self._c_tail, t + n)
        return True

    def push1(self, val) -> bool:
        return self.push([val])

    def pop(self, n: int = 1):
        """Remove up to ``n`` elements; returns what was available."""
        if n <= 0:
            return self._empty()
        rt = self.rt
        head = self._word(HEAD)
        h = rt.fetch_and_add(head, n)
        if h + n > self._c_tail:
            self._c_tail = int(rt.rget(self._word(TAIL))[0])
        got = max(0, min(n, self._c_tail - h))
        if got < n:
            self._give_back(HEAD, h + n, h + got)
        if got == 0:
            return self._empty()
        self._c_head = max(self._c_head, h + got)
        return self._read(h, got)

    # -- host-local access --------------------------------------------------
    def local_nonatomic_pop(self, n: int | None = None, raw: bool = False):
        """Host-only pop with plain loads and stores; no concurrent ops allowed.

        Pops everything when ``n`` is None.  ``raw=True`` returns
        ``(cell bytes, count)`` instead of decoded values.
        """
        self._host_only("local_nonatomic_pop")
        c = self._local_counters()
        head, tail = int(c[HEAD]), int(c[TAIL])
        got = tail - head if n is None else max(0, min(n, tail - head))
        if raw:
            out = self._local_raw(head, got), got
        else:
            out = self._local_read(head, got) if got else self._empty()
        c[HEAD] = head + got
        self._c_head = head + got
        return out

    def local_view(self) -> np.ndarray:
        """Writable numpy view of the host's live elements, e.g. for in-place sort.

        If the live range wraps the end of the ring, it is first rotated to
        the front (a local rewrite; no concurrent ops allowed).
        """
        self._host_only("local_view")
        ser = self.cells.ser
        if not ser.identity:
            raise UsageError("local_view needs a byte-copyable element type")
        c = self._local_counters()
        head, tail = int(c[HEAD]), int(c[TAIL])
        live = tail - head
        slot = head % self.capacity
        if slot + live > self.capacity:
            raw = self._local_raw(head, live)
            self._local_slots()[: len(raw)] = raw
            base = head - slot
            c[HEAD], c[TAIL] = base, base + live
            slot = 0
        arr = np.frombuffer(self.rt.segment, dtype=ser.cell_dtype, count=live,
                            offset=self.data.offset + slot * self.cell_size)
        return arr if ser.cell_dtype is ser.dtype else arr["v"]

    def begin(self) -> int:
        return int(self._local_counters()[HEAD])

    def end(self) -> int:
        return int(self._local_counters()[TAIL])


class CircularQueue(_HostedRing):
    """Ring buffer allowing concurrent pushes and pops.

    Space is claimed on ``tail``/``head``; data becomes visible to the other
    side only when the matching ``tail_ready``/``head_ready`` counter passes
    it.  Claims are made with compare-and-swap against a cached counter so a
    full or empty queue never needs to roll a counter back; the ready counters
    are advanced in claim order by compare-and-swap.

    Promise variants (``QueueProm``):

    * ``PUSH | POP`` (default): fully atomic.
    * ``PUSH`` for push, ``POP`` for pop: only the same kind overlaps, so
      claims and ready counters use fetch-and-add.
    * ``LOCAL``: host-only plain memory operations; nothing else may overlap.
    """

    def _reset_caches(self) -> None:
        self._c_tail = 0         # guess for the tail claim
        self._c_head_ready = 0   # lower bound; bounds free space
        self._c_head = 0         # guess for the head claim
        self._c_tail_ready = 0   # lower bound; bounds readable data

    def _publish(self, which: int, start: int, n: int) -> None:
        """Advance a ready counter from ``start`` to ``start + n`` once earlier claims publish."""
        rt = self.rt
        ptr = self._word(which)
        wait = None
        while True:
            prior = rt.compare_and_swap(ptr, start, start + n)
            if prior == start:
                return
            if wait is None:
                wait = rt.backoff("queue ready counter")
            wait.wait()

    def push(self, vals, promise: QueueProm = _DEFAULT) -> bool:
        n = len(vals)
        if n == 0:
            return True
        if n > self.capacity:
            return False
        rt = self.rt
        if promise & QueueProm.LOCAL:
            return self._push_local(vals, n)
        data = self.cells.encode_cells(rt, vals)
        tail = self._word(TAIL)
        if not promise & QueueProm.POP:
            # push-only phase: head is fixed, so fetch-and-add claims cannot overrun silently
            t = rt.fetch_and_add(tail, n)
            if t + n - self._c_head_ready > self.capacity:
                self._c_head_ready = int(rt.rget(self._word(HEAD_READY))[0])
                if t + n - self._c_head_ready > self.capacity:
                    self._give_back(TAIL, t + n, t)
                    return False
            self._write(t, data, n)
            rt.flush()
            ready = rt.fetch_and_add(self._word(TAIL_READY), n) + n
            self._c_tail = t + n
            self._c_tail_ready = max(self._c_tail_ready, ready)
            return True
        t = self._c_tail
        refreshed = False
        while True:
            if t + n - self._c_head_ready > self.capacity:
                if refreshed:
                    self._c_tail = t
                    return False
                self._c_head_ready = int(rt.rget(self._word(HEAD_READY))[0])
                refreshed = True
                continue
            prior = rt.compare_and_swap(tail, t, t + n)
            if prior == t:
                break
            t = prior
            refreshed = False
        self._write(t, data, n)
        rt.flush()
        self._publish(TAIL_READY, t, n)
        self._c_tail = t + n
        self._c_tail_ready = max(self._c_tail_ready, t + n)
        return True

    def pop(self, n: int = 1, promise: QueueProm = _DEFAULT):
        """Remove up to ``n`` ready elements; returns what was available."""
        if n <= 0:
            return self._empty()
        rt = self.rt
        if promise & QueueProm.LOCAL:
            return self._pop_local(n)
        head = self._word(HEAD)
        if not promise & QueueProm.PUSH:
            # pop-only phase: tail_ready is fixed
            h = rt.fetch_and_add(head, n)
            if h + n > self._c_tail_ready:
                self._c_tail_ready = int(rt.rget(self._word(TAIL_READY))[0])
            got = max(0, min(n, self._c_tail_ready - h))
            if got < n:
                self._give_back(HEAD, h + n, h + got)
            if got == 0:
                return self._empty()
            out = self._read(h, got)
            ready = rt.fetch_and_add(self._word(HEAD_READY), got) + got
            self._c_head = h + got
            self._c_head_ready = max(self._c_head_ready, ready)
            return out
        h = self._c_head
        refreshed = False
        while True:
            got = min(n, self._c_tail_ready - h)
            if got <= 0:
                if refreshed:
                    self._c_head = h
                    return self._empty()
                self._c_tail_ready = int(rt.rget(self._word(TAIL_READY))[0])
                refreshed = True
                continue
            prior = rt.compare_and_swap(head, h, h + got)
            if prior == h:
                break
            h = prior
            refreshed = False
        out = self._read(h, got)
        self._publish(HEAD_READY, h, got)
        self._c_head = h + got
        self._c_head_ready = max(self._c_head_ready, h + got)
        return out

    def _push_local(self, vals, n: int) -> bool:
        self._host_only("push with the LOCAL promise")
        c = self._local_counters()
        t = int(c[TAIL])
        if t + n - int(c[HEAD_READY]) > self.capacity:
            return False
        self._local_write(t, self.cells.encode_cells(self.rt, vals, local=True), n)
        c[TAIL] = c[TAIL_READY] = t + n
        return True

    def _pop_local(self, n: int):
        self._host_only("pop with the LOCAL promise")
        c = self._local_counters()
        h = int(c[HEAD])
        got = max(0, min(n, int(c[TAIL_READY]) - h))
        if got == 0:
            return self._empty()
        out = self._local_read(h, got)
        c[HEAD] = c[HEAD_READY] = h + got
        return out
