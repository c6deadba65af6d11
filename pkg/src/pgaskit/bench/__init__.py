"""Benchmark harness: bucket sort, k-mer counting and per-operation microbenchmarks."""

from .common import COLUMNS, BenchConfig, read_csv, write_csv
from .isx import run_isx
from .kmer import run_kmer
from .micro import run_micro

RUNNERS = {"isx": run_isx, "kmer": run_kmer, "micro": run_micro}

__all__ = ["COLUMNS", "RUNNERS", "BenchConfig", "read_csv", "run_isx", "run_kmer", "run_micro", "write_csv"]
