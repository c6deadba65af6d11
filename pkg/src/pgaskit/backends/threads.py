"""In-process backend: every rank is a thread and every segment a bytearray.

Atomics on a segment are applied under that segment's lock, which gives the
total order per word that a NIC provides.  Plain reads and writes do not take
the lock; a bytearray slice copy happens under the GIL, so an aligned word is
never observed half-written.
"""

from __future__ import annotations

import threading
import traceback

from ..core import Runtime
from ..errors import ConnectionLost, WorldError
from .base import ATOMIC_OPS, Backend, atomic_on_buffer


class ThreadWorld:
    """Segments and abort flag shared by all rank threads."""

    def __init__(self, nprocs: int, segment_size: int):
        self.nprocs = nprocs
        self.segment_size = segment_size
        self.segments = [bytearray(segment_size) for _ in range(nprocs)]
        self.locks = [threading.Lock() for _ in range(nprocs)]
        self.aborted_by: int | None = None


class ThreadBackend(Backend):
    def __init__(self, world: ThreadWorld, rank: int, watchdog: float = 10.0, native_atomics=None):
        super().__init__(rank, world.nprocs, world.segment_size, watchdog)
        self.world = world
        self._segs = world.segments
        self._locks = world.locks
        if native_atomics is not None:
            self.native_atomics = frozenset(native_atomics) | {"cas"}

    def read(self, rank, offset, nbytes):
        return self._segs[rank][offset : offset + nbytes]

    def write(self, rank, offset, data):
        self._segs[rank][offset : offset + len(data)] = data

    def _native_atomic(self, op, width, rank, offset, a, b):
        with self._locks[rank]:
            return atomic_on_buffer(self._segs[rank], op, width, offset, a, b)

    def local_segment(self):
        return self._segs[self.rank]

    def check_health(self):
        if self.world.aborted_by is not None:
            raise ConnectionLost(f"world aborted after rank {self.world.aborted_by} failed")


def spawn_world(nprocs: int, segment_size: int, rank_main, *args,
                watchdog: float = 10.0, native_atomics=ATOMIC_OPS, **kwargs) -> list:
    """Run ``rank_main(runtime, *args, **kwargs)`` on ``nprocs`` threads.

    Returns the per-rank return values.  If any rank raises, the others are
    aborted at their next wait and :class:`WorldError` carries every traceback.
    """
    world = ThreadWorld(nprocs, segment_size)
    results: list = [None] * nprocs
    failures: dict[int, str] = {}

    def body(rank: int) -> None:
        try:
            rt = Runtime(ThreadBackend(world, rank, watchdog, native_atomics))
            rt.backend.barrier()
            results[rank] = rank_main(rt, *args, **kwargs)
            rt.finalize()
        except BaseException:  # noqa: BLE001 - reported through WorldError
            failures[rank] = traceback.format_exc()
            if world.aborted_by is None:
                world.aborted_by = rank

    threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}", daemon=True)
               for r in range(nprocs)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise WorldError(failures)
    return results
