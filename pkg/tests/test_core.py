import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pgaskit import (AllocationError, DeadlockError, GlobalPtr, OpCounts, UsageError, WorldError,
                     spawn_world)
from pgaskit.core import HEADER_SIZE, U32, U64, SegmentAllocator

from conftest import run


# -- pointers and allocator (no world needed) ------------------------------
@given(st.integers(0, 1000), st.integers(8, 1 << 40), st.integers(-100, 100))
def test_pointer_arithmetic_steps_by_itemsize(rank, offset, k):
    p = GlobalPtr(rank, offset * 8, U64)
    q = p + k
    assert q.offset - p.offset == 8 * k
    assert (q - k) == p
    assert GlobalPtr.from_word(p.to_word(), U64) == p


def test_null_pointer():
    assert GlobalPtr(0, 0).is_null
    assert GlobalPtr.from_word(0).is_null
    assert not GlobalPtr(1, 0).is_null


def test_allocator_reuses_and_rejects_double_free():
    heap = SegmentAllocator(64, 64 + 1024)
    a, reused = heap.alloc(100)
    assert not reused and a % 8 == 0
    heap.free(a)
    b, reused = heap.alloc(100)
    assert b == a and reused
    with pytest.raises(UsageError):
        heap.free(a + 8)
    heap.free(b)
    with pytest.raises(UsageError):
        heap.free(b)
    with pytest.raises(AllocationError):
        heap.alloc(4096)


def test_opcounts_arithmetic():
    a = OpCounts(1, 2, 3, 4)
    assert a - OpCounts(1, 1, 1, 1) == OpCounts(0, 1, 2, 3)
    assert (a + a).remote == 12


# -- one-sided operations ----------------------------------------------------
def _rget_rput(rt):
    mine = rt.alloc(4)
    ptrs = rt.allgather(mine)
    right = ptrs[(rt.rank + 1) % rt.nprocs]
    rt.rput(right, np.arange(4, dtype=np.uint64) + 100 * rt.rank)
    rt.flush()
    rt.barrier()
    got = rt.local_view(mine, 4).tolist()
    left = (rt.rank - 1) % rt.nprocs
    return got == [100 * left + i for i in range(4)]


@pytest.mark.parametrize("nprocs", [2, 4])
def test_rput_then_barrier_is_visible(backend, nprocs):
    assert all(run(backend, nprocs, _rget_rput))


def _counting(rt):
    p = rt.alloc(1000, np.uint8)
    rt.reset_op_counts()
    rt.rget(p, 1000)
    rt.rget_bytes(p, 1)
    rt.rput(p, b"x" * 1000)
    rt.fetch_and_add(rt.alloc(1), 1)
    rt.local_view(p, 10)[:] = 1
    rt.barrier()
    return rt.op_counts()


def test_each_call_counts_once(backend):
    for c in run(backend, 2, _counting):
        assert c == OpCounts(R=2, W=1, A=1, B=1)


def _faa_total_order(rt, m):
    word = rt.broadcast(rt.alloc(1) if rt.rank == 0 else None)
    rt.barrier()
    return [rt.fetch_and_add(word, 1) for _ in range(m)]


@pytest.mark.parametrize("nprocs", [2, 4])
def test_faa_tickets_are_a_permutation(backend, nprocs):
    m = 200
    tickets = [t for r in run(backend, nprocs, _faa_total_order, m) for t in r]
    assert sorted(tickets) == list(range(nprocs * m))


def _cas_winner(rt, rounds):
    words = rt.broadcast(rt.alloc(rounds) if rt.rank == 0 else None)
    rt.barrier()
    return [rt.compare_and_swap(words + i, 0, rt.rank + 1) == 0 for i in range(rounds)]


@pytest.mark.parametrize("nprocs", [2, 4])
def test_cas_has_exactly_one_winner(backend, nprocs):
    wins = np.array(run(backend, nprocs, _cas_winner, 50))
    assert (wins.sum(axis=0) == 1).all()


def _fence(rt, rounds):
    """Writer: data, flush, then flag.  Reader: on seeing the flag, data must be there."""
    base = rt.broadcast(rt.alloc(2 * rounds) if rt.rank == 1 else None, root=1)
    bad = 0
    if rt.rank == 0:
        for i in range(rounds):
            rt.rput(base + 2 * i, [i + 7])
            rt.flush()
            rt.rput(base + 2 * i + 1, [1])
            rt.flush()
    elif rt.rank == 1:
        for i in range(rounds):
            wait = rt.backoff("flag")
            while rt.local_view(base + 2 * i + 1, 1)[0] != 1:
                wait.wait()
            bad += int(rt.local_view(base + 2 * i, 1)[0]) != i + 7
    rt.barrier()
    return bad


def test_flush_orders_writes(backend):
    assert sum(run(backend, 2, _fence, 200)) == 0


def _atomics(rt):
    w = rt.broadcast(rt.alloc(4) if rt.rank == 0 else None)
    rt.barrier()
    rt.fetch_and_or(w, 1 << rt.rank)
    rt.fetch_and_xor(w + 1, 1 << rt.rank)
    rt.fetch_and_add(w + 2, -1)
    rt.barrier()
    if rt.rank == 0:
        rt.rput(w + 3, [0xFF])
        rt.flush()
    rt.barrier()
    rt.fetch_and_and(w + 3, ~(1 << rt.rank) & (2**64 - 1))
    rt.barrier()
    return rt.rget(w, 4).tolist()


@pytest.mark.parametrize("native", [None, ("cas",)])
def test_atomic_results(native):
    kw = {} if native is None else {"native_atomics": native}
    for r in spawn_world("threads", 4, 1 << 20, _atomics, **kw):
        assert r == [0b1111, 0b1111, 2**64 - 4, 0xF0]


def test_atomic_results_socket():
    for r in run("socket", 4, _atomics):
        assert r == [0b1111, 0b1111, 2**64 - 4, 0xF0]


def _atomic_u32(rt):
    w = rt.broadcast(rt.alloc(2, U32) if rt.rank == 0 else None)
    rt.barrier()
    rt.fetch_and_add(w + 1, 1)
    rt.barrier()
    return int(rt.rget(w + 1)[0]), int(rt.rget(w)[0])


def test_32bit_atomics_do_not_spill(backend):
    assert run(backend, 3, _atomic_u32)[0] == (3, 0)


def _misuse(rt):
    errors = []
    p = rt.alloc(2)
    for call in (lambda: rt.fetch_and_add(p.cast(np.uint8), 1),
                 lambda: rt.fetch_and_add(GlobalPtr(rt.rank, p.offset + 4, U64), 1),
                 lambda: rt.rget(GlobalPtr(rt.nprocs, 0, U64)),
                 lambda: rt.rget(GlobalPtr(0, rt.segment_size - 4, U64)),
                 lambda: rt.dealloc(GlobalPtr((rt.rank + 1) % rt.nprocs, p.offset, U64)),
                 lambda: rt.local_view(GlobalPtr((rt.rank + 1) % rt.nprocs, p.offset, U64), 1)):
        try:
            call()
            errors.append(False)
        except UsageError:
            errors.append(True)
    return errors


def test_misuse_raises_usage_error(backend):
    assert all(all(r) for r in run(backend, 2, _misuse))


def _alloc_reuse_zeroed(rt):
    p = rt.alloc(16)
    rt.local_view(p, 16)[:] = 7
    rt.dealloc(p)
    q = rt.alloc(16)
    return q == p and not rt.local_view(q, 16).any()


def test_reused_allocation_is_zeroed():
    assert all(spawn_world("threads", 1, 1 << 20, _alloc_reuse_zeroed))


def _exhaust(rt):
    with pytest.raises(AllocationError):
        rt.alloc(rt.segment_size)
    return True


def test_allocation_failure(backend):
    assert all(run(backend, 2, _exhaust))


# -- collectives -------------------------------------------------------------
def _collectives(rt):
    big = list(range(5000))
    return (
        rt.broadcast("root says" if rt.rank == 1 else None, root=1),
        rt.allgather(rt.rank * 10),
        rt.allreduce(rt.rank + 1),
        rt.allreduce(rt.rank, "max"),
        rt.allreduce(rt.rank, "min"),
        rt.allreduce(1 << rt.rank, "|"),
        len(rt.broadcast(big if rt.rank == 0 else None)),
        [len(x) for x in rt.allgather(big[: 1000 * (rt.rank + 1)])],
    )


@pytest.mark.parametrize("nprocs", [2, 4])
def test_collectives(backend, nprocs):
    for r in run(backend, nprocs, _collectives):
        assert r[0] == "root says"
        assert r[1] == [10 * i for i in range(nprocs)]
        assert r[2] == nprocs * (nprocs + 1) // 2
        assert (r[3], r[4]) == (nprocs - 1, 0)
        assert r[5] == (1 << nprocs) - 1
        assert r[6] == 5000
        assert r[7] == [1000 * (i + 1) for i in range(nprocs)]


def _collective_no_leak(rt):
    before = rt._heap.bytes_in_use
    for _ in range(5):
        rt.allgather(list(range(3000)))
        rt.broadcast(list(range(3000)))
    return rt._heap.bytes_in_use - before


def test_collectives_release_scratch(backend):
    assert run(backend, 2, _collective_no_leak) == [0, 0]


# -- failure handling ----------------------------------------------------------
def _stall(rt):
    if rt.rank == 0:
        flag = rt.alloc(1)
        wait = rt.backoff("a flag nobody sets")
        while not rt.local_view(flag, 1)[0]:
            wait.wait()


def test_watchdog_reports_deadlock():
    t = time.monotonic()
    with pytest.raises(WorldError) as exc:
        spawn_world("threads", 2, 1 << 20, _stall, watchdog=0.5)
    assert "DeadlockError" in str(exc.value)
    assert time.monotonic() - t < 10


def _raise_on_one(rt):
    if rt.rank == 1:
        raise ValueError("boom")
    rt.barrier()


def test_rank_failure_aborts_world(backend):
    with pytest.raises(WorldError) as exc:
        run(backend, 3, _raise_on_one, watchdog=5.0)
    assert 1 in exc.value.failures
    assert "boom" in exc.value.failures[1]


def test_header_reserved():
    def first_alloc(rt):
        return rt.alloc(1).offset
    assert spawn_world("threads", 1, 1 << 20, first_alloc)[0] >= HEADER_SIZE


def test_deadlock_error_is_pgas_error():
    from pgaskit import PGASError
    assert issubclass(DeadlockError, PGASError)
