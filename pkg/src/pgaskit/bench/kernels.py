"""Timing of the jit-compiled kernels against their numpy equivalents."""

from __future__ import annotations

import time

import numpy as np

from .. import kernels


def _best(fn, *args, repeat: int) -> float:
    fn(*args)  # warm-up; includes jit compilation for the numba path
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def run_kernels_bench(n: int = 1_000_000, repeat: int = 5, seed: int = 0) -> list[dict]:
    """One row per (kernel, implementation): best wall time and elements per second."""
    rng = np.random.default_rng(seed)
    hashes = rng.integers(0, 1 << 63, size=n, dtype=np.int64).astype(np.uint64)
    codes = rng.integers(0, 4, size=n, dtype=np.uint8)
    codes[rng.random(n) < 0.001] = 4
    inputs = {"mix64": (hashes,), "bloom_bits": (hashes, 1 << 20, 4), "encode_kmers": (codes, 21)}
    rows = []
    for impl, fns in kernels.implementations().items():
        for name, fn in fns.items():
            sec = _best(fn, *inputs[name], repeat=repeat)
            rows.append({"kernel": name, "implementation": impl, "n": n,
                         "seconds": f"{sec:.6f}", "elements_per_sec": f"{n / sec:.0f}"})
    return rows
