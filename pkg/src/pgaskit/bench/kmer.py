"""k-mer counting histogram over a distributed hash table.

Every length-``k`` window of every read is a k-mer, encoded 2 bits per base
into a ``uint64``.  Windows touching a base outside ``ACGT`` are skipped and
counted.  Reads are dealt to ranks round-robin.

Plain mode inserts ``(kmer, 1)`` for every window through a
:class:`HashMapBuffer` that adds counts.  Bloom mode keeps k-mers seen once
out of the table:

1. every window is inserted into a Bloom filter; a k-mer whose insert reports
   "already present" becomes a candidate and is registered in the table with
   count 0;
2. every window is counted again, updating only keys already in the table.

Every k-mer occurring twice or more is a candidate, so the histogram of
counts >= 2 is exact in both modes; the table holds only candidates.
"""

from __future__ import annotations

import math
import operator

import numpy as np

from ..bloom import BloomFilter
from ..buffer import HashMapBuffer
from ..core import OpCounts, Runtime
from ..hashmap import HashMap
from ..kernels import encode_kmers, sequence_codes
from .common import BenchConfig, Timer, launch, row, total_counts

READ_LEN = 100
COVERAGE = 8
SEPARATOR = 4  # non-ACGT code placed between reads so no window spans two


def _keep(old, new):
    return old


def synthetic_reads(seed: int, windows: int, k: int, error_fraction: float = 0.3,
                    read_len: int = READ_LEN) -> np.ndarray:
    """Reads (rows of base codes) sampled from a random genome at 8x coverage.

    Each read has two error slots whose k-window footprints lie inside the
    read and do not overlap; each slot carries one substitution with the
    probability that makes ``error_fraction`` of all windows contain an error.
    """
    per_read = read_len - k + 1
    if per_read < 1:
        raise ValueError(f"k={k} exceeds the read length {read_len}")
    n_reads = max(1, math.ceil(windows / per_read))
    rng = np.random.default_rng(seed)
    genome_len = max(read_len, n_reads * read_len // COVERAGE)
    genome = rng.integers(0, 4, size=genome_len, dtype=np.uint8)
    starts = rng.integers(0, genome_len - read_len + 1, size=n_reads)
    reads = genome[starts[:, None] + np.arange(read_len)]
    # Error slots are position ranges whose k-window footprints lie inside the
    # read and do not overlap, so every error spoils exactly k windows.
    width = min(10, (read_len - 3 * k + 3) // 2)
    if width >= 1:
        slots = [(k - 1, k - 1 + width), (read_len - k - width + 1, read_len - k + 1)]
    else:
        slots = [(k - 1, read_len - k + 1)]
    p = min(1.0, error_fraction * per_read / (len(slots) * k))
    for lo, hi in slots:
        hit = rng.random(n_reads) < p
        pos = rng.integers(lo, hi, size=n_reads)
        shift = rng.integers(1, 4, size=n_reads, dtype=np.uint8)
        rows = np.flatnonzero(hit)
        reads[rows, pos[rows]] = (reads[rows, pos[rows]] + shift[rows]) % 4
    return reads


def read_sequences(path: str) -> list[str]:
    """One sequence per line; blank lines and lines starting with '#' are ignored."""
    with open(path) as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]


def pack_reads(reads) -> np.ndarray:
    """Concatenate reads into one code array with a separator after each read."""
    if isinstance(reads, np.ndarray):
        if reads.size == 0:
            return np.zeros(0, dtype=np.uint8)
        sep = np.full((reads.shape[0], 1), SEPARATOR, dtype=np.uint8)
        return np.hstack([reads.astype(np.uint8), sep]).ravel()
    parts = []
    for seq in reads:
        parts.append(sequence_codes(seq))
        parts.append(np.array([SEPARATOR], dtype=np.uint8))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)


def rank_kmers(cfg: BenchConfig, rank: int, nprocs: int) -> tuple[np.ndarray, int]:
    """This rank's k-mers (one per valid window) and its count of skipped windows."""
    if cfg.input:
        reads = read_sequences(cfg.input)[rank::nprocs]
        skipped = sum(max(0, len(s) - cfg.k + 1) for s in reads)
        codes = pack_reads(reads)
    else:
        rows = synthetic_reads(cfg.seed, cfg.windows, cfg.k)[rank::nprocs]
        skipped = rows.shape[0] * (rows.shape[1] - cfg.k + 1)
        codes = pack_reads(rows)
    kmers, valid = encode_kmers(codes, cfg.k)
    out = kmers[valid]
    return out, skipped - len(out)


def _pow2_at_least(n: int) -> int:
    return 1 << max(4, math.ceil(math.log2(max(n, 1))))


def _rank_main(rt: Runtime, cfg: BenchConfig):
    if not 1 <= cfg.k <= 32:
        raise ValueError("k must be between 1 and 32")
    P, M = rt.nprocs, cfg.message_size
    kmers, skipped = rank_kmers(cfg, rt.rank, P)
    total = rt.allreduce(len(kmers))
    qcap = math.ceil(1.25 * total / P) + P * M + 16
    ones = np.ones(len(kmers), dtype=np.int64)
    rows = []

    if cfg.bloom:
        bloom = BloomFilter(rt, total, 8, 4, np.uint64)
        with Timer(rt) as t1:
            present = bloom.insert_many(kmers)
            cand = np.unique(kmers[present])
        n_cand = rt.allreduce(len(cand))
        table = HashMap(rt, _pow2_at_least(math.ceil(n_cand / 0.7)), np.uint64, np.int64)
        buf = HashMapBuffer(table, M, queue_capacity=qcap, combine=_keep)
        with Timer(rt) as t2:
            buf.insert_many(cand, np.zeros(len(cand), dtype=np.int64))
            buf.flush()
        buf.combine, buf.create = operator.add, False
        with Timer(rt) as t3:
            buf.insert_many(kmers, ones)
            buf.flush()
        phases = [("bloom_insert", t1, total), ("register_candidates", t2, n_cand), ("count", t3, total)]
        extra_bytes = bloom.memory_bytes()
    else:
        table = HashMap(rt, _pow2_at_least(math.ceil(total * 0.75)), np.uint64, np.int64)
        buf = HashMapBuffer(table, M, queue_capacity=qcap, combine=operator.add)
        with Timer(rt) as t3:
            buf.insert_many(kmers, ones)
            buf.flush()
        phases = [("count", t3, total)]
        extra_bytes = 0
    failed = rt.allreduce(buf.failed)
    if failed:
        raise RuntimeError(f"{failed} k-mer inserts failed: hash table too small")

    keys, counts = table.local_arrays()
    local_hist = np.bincount(counts[counts >= 2]) if len(counts) else np.zeros(0, dtype=np.int64)
    hist: dict[int, int] = {}
    for h in rt.allgather(local_hist):
        for c in np.flatnonzero(h):
            hist[int(c)] = hist.get(int(c), 0) + int(h[c])
    entries = rt.allreduce(len(keys))
    skipped = rt.allreduce(skipped)
    variant = "bloom" if cfg.bloom else "plain"
    for name, timer, ops in phases:
        rows.append(row(cfg, name, variant, ops, timer.seconds, total_counts(rt, timer.counts)))
    summary = dict(k=cfg.k, windows=total, skipped_windows=skipped, table_entries=entries,
                   table_bytes=table.memory_bytes(), bloom_bytes=extra_bytes,
                   distinct_ge2=sum(hist.values()))
    rows.append(row(cfg, "summary", variant, total, sum(t.seconds for _, t, _ in phases),
                    total_counts(rt, sum((t.counts for _, t, _ in phases), OpCounts())), **summary))
    for c in sorted(hist):
        rows.append(row(cfg, "histogram", f"count={c}", hist[c], 0.0, OpCounts()))
    return {"rows": rows, "histogram": hist, **summary}


def run_kmer(cfg: BenchConfig) -> dict:
    """Count k-mers; returns the histogram of counts >= 2, table load and report rows."""
    return launch(cfg, _rank_main)[0]


def count_kmers_reference(sequences, k: int) -> dict:
    """Plain dict count of every valid window, for checking small inputs."""
    counts: dict[str, int] = {}
    for seq in sequences:
        seq = seq.upper()
        for i in range(len(seq) - k + 1):
            w = seq[i : i + k]
            if set(w) <= set("ACGT"):
                counts[w] = counts.get(w, 0) + 1
    return counts
