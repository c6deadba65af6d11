"""Configuration, world launching and the CSV report shared by the benchmarks."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

from ..backends import socket as socket_backend
from ..backends import spawn_world
from ..core import OpCounts, Runtime

# Report schema: one row per (phase, variant) measurement, counts summed over ranks.
COLUMNS = (
    "benchmark", "backend", "nprocs", "seed", "phase", "variant", "ops", "seconds",
    "ops_per_sec", "R", "W", "A", "B", "R_per_op", "W_per_op", "A_per_op", "detail",
)


@dataclass
class BenchConfig:
    benchmark: str
    backend: str = "threads"
    nprocs: int = 4
    keys_per_rank: int = 1 << 16
    message_size: int = 1024
    seed: int = 0
    out: str | None = None
    segment_size: int = 64 << 20
    watchdog: float = 30.0
    # socket launch of a single rank; ``None`` spawns the whole world here
    rank: int | None = None
    peers: list | None = None
    # k-mer options
    k: int = 21
    bloom: bool = False
    input: str | None = None
    windows: int = 1_000_000
    extra: dict = field(default_factory=dict)


def launch(cfg: BenchConfig, rank_main, *args) -> list:
    """Run ``rank_main(rt, cfg, *args)``; per-rank results (a one-element list for a single socket rank)."""
    if cfg.rank is not None:
        if cfg.backend != "socket" or not cfg.peers:
            raise ValueError("--rank needs --backend socket and --peers")
        res = socket_backend.run_rank(cfg.rank, cfg.peers, cfg.segment_size, rank_main, cfg, *args,
                                      watchdog=cfg.watchdog)
        return [res]
    return spawn_world(cfg.backend, cfg.nprocs, cfg.segment_size, rank_main, cfg, *args,
                       watchdog=cfg.watchdog)


class Timer:
    """Wall time and summed op counts of one phase, measured between barriers."""

    def __init__(self, rt: Runtime):
        self.rt = rt

    def __enter__(self):
        self.rt.barrier()
        self._c0 = self.rt.op_counts()
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        if exc[0] is None:
            self.counts = self.rt.op_counts() - self._c0
            self.rt.barrier()
            self.seconds = time.perf_counter() - self._t0


def total_counts(rt: Runtime, counts: OpCounts) -> OpCounts:
    """Sum of ``counts`` over every rank.  Collective."""
    return rt.allreduce(counts)


def row(cfg: BenchConfig, phase: str, variant: str, ops: int, seconds: float,
        counts: OpCounts, **detail) -> dict:
    per = max(ops, 1)
    return {
        "benchmark": cfg.benchmark, "backend": cfg.backend, "nprocs": cfg.nprocs, "seed": cfg.seed,
        "phase": phase, "variant": variant, "ops": ops, "seconds": f"{seconds:.6f}",
        "ops_per_sec": f"{ops / seconds:.1f}" if seconds > 0 else "",
        "R": counts.R, "W": counts.W, "A": counts.A, "B": counts.B,
        "R_per_op": f"{counts.R / per:.4f}", "W_per_op": f"{counts.W / per:.4f}",
        "A_per_op": f"{counts.A / per:.4f}",
        "detail": ";".join(f"{k}={v}" for k, v in detail.items()),
    }


def write_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
