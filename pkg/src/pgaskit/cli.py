"""Command line: ``pgaskit bench ...`` and ``pgaskit kernels-bench``."""

from __future__ import annotations

import argparse
import csv
import sys

from .backends import BACKENDS
from .backends.socket import parse_peers


def _bench_parser(sub) -> None:
    p = sub.add_parser("bench", help="run a benchmark and write a CSV report")
    p.add_argument("benchmark", choices=("isx", "kmer", "micro"))
    p.add_argument("--backend", choices=BACKENDS, default="threads")
    p.add_argument("--nprocs", type=int, default=4)
    p.add_argument("--keys-per-rank", type=int, default=1 << 16,
                   help="isx: keys per rank; micro: operations per rank")
    p.add_argument("--message-size", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV report path (written by rank 0)")
    p.add_argument("--segment-mb", type=int, default=64, help="shared segment per rank, MiB")
    p.add_argument("--watchdog", type=float, default=30.0, help="seconds before a stalled wait fails")
    p.add_argument("--rank", type=int, help="socket backend: run only this rank")
    p.add_argument("--peers", help="socket backend: host:port of every rank, in rank order")
    p.add_argument("--k", type=int, default=21, help="kmer: k-mer length")
    p.add_argument("--bloom", action="store_true", help="kmer: Bloom filter pre-pass")
    p.add_argument("--input", help="kmer: sequence file (one per line, '#' comments)")
    p.add_argument("--windows", type=int, default=1_000_000, help="kmer: synthetic dataset size")


def _run_bench(args) -> int:
    from .bench import RUNNERS, BenchConfig, write_csv

    peers = parse_peers(args.peers) if args.peers else None
    nprocs = len(peers) if peers else args.nprocs
    cfg = BenchConfig(
        benchmark=args.benchmark, backend=args.backend, nprocs=nprocs,
        keys_per_rank=args.keys_per_rank, message_size=args.message_size, seed=args.seed,
        out=args.out, segment_size=args.segment_mb << 20, watchdog=args.watchdog,
        rank=args.rank, peers=peers, k=args.k, bloom=args.bloom, input=args.input,
        windows=args.windows,
    )
    result = RUNNERS[args.benchmark](cfg)
    if args.rank not in (None, 0):
        return 0
    rows = result["rows"]
    if args.out:
        write_csv(args.out, rows)
    for r in rows:
        if r["phase"] != "histogram":
            print(f"{r['phase']:<24} {r['variant']:<20} ops={r['ops']:<9} s={r['seconds']:<10} "
                  f"R/op={r['R_per_op']} W/op={r['W_per_op']} A/op={r['A_per_op']} {r['detail']}")
    if args.benchmark == "isx" and not result["ok"]:
        print("ISx verification FAILED", file=sys.stderr)
        return 1
    return 0


def _run_kernels(args) -> int:
    from .bench.kernels import run_kernels_bench

    rows = run_kernels_bench(args.n, args.repeat)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pgaskit")
    sub = parser.add_subparsers(dest="command", required=True)
    _bench_parser(sub)
    k = sub.add_parser("kernels-bench", help="time numba kernels against the numpy fallback")
    k.add_argument("--n", type=int, default=1_000_000)
    k.add_argument("--repeat", type=int, default=5)
    k.add_argument("--out")
    args = parser.parse_args(argv)
    if args.command == "bench":
        return _run_bench(args)
    return _run_kernels(args)


if __name__ == "__main__":
    sys.exit(main())
