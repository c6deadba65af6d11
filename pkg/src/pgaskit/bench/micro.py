"""Single-operation microbenchmarks.

Each row times ``ops_per_rank`` calls of one operation on every rank at once
and reports the summed remote-operation counts, so per-op ratios can be set
against best-case costs.
"""

from __future__ import annotations

import numpy as np

from ..bloom import BloomFilter
from ..buffer import HashMapBuffer
from ..core import HashProm, QueueProm, Runtime
from ..hashmap import HashMap
from ..queues import CircularQueue, FastQueue
from .common import BenchConfig, Timer, launch, row, total_counts

MANY = 16  # elements per call in the *_many rows


def _rank_main(rt: Runtime, cfg: BenchConfig):
    P, n = rt.nprocs, cfg.keys_per_rank
    rng = np.random.default_rng([cfg.seed, rt.rank])
    keys = (rng.integers(0, 1 << 62, size=n, dtype=np.int64) | 1).tolist()
    rows = []

    def measure(name: str, variant: str, body, ops: int | None = None):
        with Timer(rt) as t:
            body()
        total = rt.allreduce(n if ops is None else ops)
        rows.append(row(cfg, name, variant, total, t.seconds, total_counts(rt, t.counts)))

    # -- hash table ---------------------------------------------------------
    capacity = 1 << max(4, int(np.ceil(np.log2(max(1, n * P) * 64))))
    table = HashMap(rt, capacity)
    measure("hash_insert", "find|insert", lambda: [table.insert(k, k) for k in keys])
    measure("hash_find_atomic", "find|insert", lambda: [table.find(k) for k in keys])
    measure("hash_find", "find", lambda: [table.find(k, HashProm.FIND) for k in keys])
    table2 = HashMap(rt, capacity)
    buf = HashMapBuffer(table2, cfg.message_size, queue_capacity=2 * n + P * cfg.message_size)

    def buffered():
        for k in keys:
            buf.insert(k, k)
        buf.flush()
    measure("hash_insert_buffer", "buffered", buffered)

    # -- circular queue -----------------------------------------------------
    qcap = max(16, n * P * MANY)
    single = CircularQueue(rt, 0, qcap)
    many = [CircularQueue(rt, r, max(16, n * MANY)) for r in range(P)]
    target = many[(rt.rank + 1) % P]
    for label, q in (("single_queue", single), ("many_queues", None)):
        q = q or target
        for variant, ppush, ppop in (("push|pop", QueueProm.PUSH | QueueProm.POP, QueueProm.PUSH | QueueProm.POP),
                                     ("push-only/pop-only", QueueProm.PUSH, QueueProm.POP)):
            measure(f"cq_push_{label}", variant, lambda: [q.push([k], ppush) for k in keys])
            measure(f"cq_pop_{label}", variant, lambda: [q.pop(1, ppop) for _ in keys])

    # -- fast queue ---------------------------------------------------------
    fq = FastQueue(rt, 0, max(16, n * P * MANY))
    measure("fq_push", "phased", lambda: [fq.push([k]) for k in keys])
    measure("fq_pop", "phased", lambda: [fq.pop(1) for _ in keys])
    block = keys[:MANY]
    calls = max(1, n // MANY)
    measure("fq_push_many", f"{MANY}_per_call", lambda: [fq.push(block) for _ in range(calls)], calls)
    measure("fq_pop_many", f"{MANY}_per_call", lambda: [fq.pop(MANY) for _ in range(calls)], calls)

    # -- bloom filter -------------------------------------------------------
    bloom = BloomFilter(rt, max(1, n * P))
    measure("bloom_insert", "atomic", lambda: [bloom.insert(k) for k in keys])
    measure("bloom_find", "read", lambda: [bloom.find(k) for k in keys])
    return {"rows": rows}


def run_micro(cfg: BenchConfig) -> dict:
    return launch(cfg, _rank_main)[0]
