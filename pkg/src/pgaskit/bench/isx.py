"""Integer bucket sort over FastQueues.

Keys are uniform over ``[0, nprocs * 2**19)``; rank ``r`` owns the key range
``[r * 2**19, (r+1) * 2**19)``.  Every rank buffers keys per destination,
pushes full buffers of ``message_size`` keys to the destination's queue,
pushes the partial buffers, and after a barrier sorts its own queue in place.
"""

from __future__ import annotations

import math

import numpy as np

from ..core import Runtime
from ..queues import FastQueue
from .common import BenchConfig, Timer, launch, row, total_counts

RANGE_BITS = 19


def generate_keys(seed: int, rank: int, nprocs: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([seed, rank])
    return rng.integers(0, nprocs << RANGE_BITS, size=n, dtype=np.int64)


def queue_capacity(keys_per_rank: int, nprocs: int, message_size: int) -> int:
    return max(16, math.ceil(1.5 * keys_per_rank) + nprocs * message_size)


def _rank_main(rt: Runtime, cfg: BenchConfig):
    P, M = rt.nprocs, cfg.message_size
    keys = generate_keys(cfg.seed, rt.rank, P, cfg.keys_per_rank)
    cap = queue_capacity(cfg.keys_per_rank, P, M)
    queues = [FastQueue(rt, r, cap, np.int64) for r in range(P)]

    with Timer(rt) as push:
        dest = keys >> RANGE_BITS
        order = np.argsort(dest, kind="stable")
        bounds = np.searchsorted(dest[order], np.arange(P + 1))
        for r in range(P):
            mine = keys[order[bounds[r] : bounds[r + 1]]]
            for lo in range(0, len(mine), M):
                block = mine[lo : lo + M]
                if not queues[r].push(block):
                    raise RuntimeError(
                        f"ISx queue on rank {r} overflowed (capacity {cap}); "
                        f"raise the capacity above 1.5 * keys-per-rank + nprocs * message-size")
    with Timer(rt) as sort:
        view = queues[rt.rank].local_view()
        view.sort()
        out = view.copy()

    n_total = rt.allreduce(len(keys))
    lo, hi = rt.rank << RANGE_BITS, (rt.rank + 1) << RANGE_BITS
    local_ok = bool(np.all(out[:-1] <= out[1:])) and (len(out) == 0 or (out[0] >= lo and out[-1] < hi))
    checks = rt.allgather((local_ok, len(out), int(keys.sum()), int(out.sum())))
    sorted_ok = all(c[0] for c in checks)
    count_ok = sum(c[1] for c in checks) == n_total
    sum_ok = sum(c[2] for c in checks) == sum(c[3] for c in checks)
    push_c = total_counts(rt, push.counts)
    sort_c = total_counts(rt, sort.counts)
    rows = [
        row(cfg, "push", "fastqueue", n_total, push.seconds, push_c, message_size=M, capacity=cap),
        row(cfg, "local_sort", "local_view", n_total, sort.seconds, sort_c,
            sorted=int(sorted_ok), counts_match=int(count_ok), sums_match=int(sum_ok)),
    ]
    return {"rows": rows, "output": out, "ok": sorted_ok and count_ok and sum_ok}


def run_isx(cfg: BenchConfig) -> dict:
    """Run the sort; returns rows, per-rank outputs and the in-world verdict."""
    results = launch(cfg, _rank_main)
    return {"rows": results[0]["rows"], "outputs": [r["output"] for r in results],
            "ok": results[0]["ok"]}
