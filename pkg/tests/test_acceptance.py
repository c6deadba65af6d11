"""Acceptance criteria.  Each case records a pass/fail line that is printed in
the "acceptance criteria" section of the pytest summary, then asserts."""

import collections
import contextlib
import random
import time

import numpy as np
import pytest

from pgaskit import (BloomFilter, CircularQueue, FastQueue, HashMap, HashMapBuffer, HashProm,
                     OpCounts, QueueProm)
from pgaskit.bench import BenchConfig, run_isx, run_kmer
from pgaskit.bench.isx import generate_keys
from pgaskit.bench.kmer import rank_kmers
from pgaskit.kernels import bloom_bits, mix64

from conftest import BACKENDS, run

COSTS = "cost-table conformance"
HASH = "hash oracle equivalence"
QUEUE = "queue conservation"
BLOOM_FN = "bloom no false negatives and exactly one first"
BLOOM_FPR = "bloom false-positive rate"
ISX = "isx correctness"
BUFFER = "buffering benefit"
KMER = "k-mer differential"
EQUIV = "backend equivalence"

TIME_LIMIT = 60.0


@pytest.fixture
def record(request):
    """``with record(criterion, case) as rec: ... rec(ok, detail)``; errors record a FAIL."""
    lines = request.config.acceptance_lines

    @contextlib.contextmanager
    def scope(criterion, case):
        results = []
        t0 = time.perf_counter()
        try:
            yield lambda ok, detail="": results.append((bool(ok), detail))
        except Exception as exc:
            lines.append((criterion, case, False, f"error: {type(exc).__name__}: {exc}"[:300]))
            raise
        secs = time.perf_counter() - t0
        for ok, detail in results:
            lines.append((criterion, case, ok, f"{detail} ({secs:.1f}s)".strip()))
        for ok, detail in results:
            assert ok, f"{criterion} [{case}]: {detail}"

    return scope


# -- 1. best-case costs --------------------------------------------------------
def _cost_table(rt):
    """Rank 1 operates on structures stored on rank 0; rank 0 measures the LOCAL insert."""
    table = HashMap(rt, 1 << 10)
    cq = CircularQueue(rt, 0, 64)
    fq = FastQueue(rt, 0, 64)
    bloom = BloomFilter(rt, 4096)
    remote_key = next(k for k in range(1 << 20) if table.home_rank(k) == 0)
    local_key = next(k for k in range(1 << 20) if table.home_rank(k) == 1)
    remote_val = next(v for v in range(1 << 20) if bloom.locate(v)[0].rank == 0)
    out = {}

    def measure(name, fn):
        rt.reset_op_counts()
        fn()
        out[name] = rt.op_counts()

    if rt.rank == 1:
        both = QueueProm.PUSH | QueueProm.POP
        measure("hash insert", lambda: table.insert(remote_key, 1))
        measure("hash find fully-atomic", lambda: table.find(remote_key))
        measure("hash find promise-find", lambda: table.find(remote_key, HashProm.FIND))
        measure("hash insert promise-local", lambda: table.insert(local_key, 1, HashProm.LOCAL))
        measure("circularqueue push", lambda: cq.push([1], both))
        measure("circularqueue pop", lambda: cq.pop(1, both))
        measure("fastqueue push", lambda: fq.push([1]))
    rt.barrier()
    if rt.rank == 1:
        measure("fastqueue pop", lambda: fq.pop(1))
        measure("bloom insert", lambda: bloom.insert(remote_val))
        measure("bloom find", lambda: bloom.find(remote_val))
    rt.barrier()
    return out


EXPECTED_COSTS = {
    "hash insert": OpCounts(A=2, W=1),
    "hash find fully-atomic": OpCounts(A=2, R=1),
    "hash find promise-find": OpCounts(R=1),
    "hash insert promise-local": OpCounts(),
    "circularqueue push": OpCounts(A=2, W=1),
    "circularqueue pop": OpCounts(A=2, R=1),
    "fastqueue push": OpCounts(A=1, W=1),
    "fastqueue pop": OpCounts(A=1, R=1),
    "bloom insert": OpCounts(A=1),
    "bloom find": OpCounts(R=1),
}


@pytest.mark.parametrize("backend", BACKENDS)
def test_cost_table(record, backend):
    with record(COSTS, backend) as rec:
        got = run(backend, 2, _cost_table)[1]
        for op, want in EXPECTED_COSTS.items():
            rec(got[op] == want, f"{op}: got {got[op]}, expected {want}")


# -- 2. hash table against a dict ---------------------------------------------
N_KEYS = 100_000
HASH_CAPACITY = 1 << 17  # load factor 0.76


def _key_sets(seed):
    rng = np.random.default_rng(seed)
    raw = np.unique(rng.integers(1, 1 << 62, size=int(2.2 * N_KEYS), dtype=np.int64))
    rng.shuffle(raw)
    return raw[:N_KEYS], raw[N_KEYS : 2 * N_KEYS]


def _hash_oracle(rt, seed):
    present, absent = _key_sets(seed)
    value = lambda k: (k * 7 + 3) & ((1 << 62) - 1)
    oracle = {int(k): value(int(k)) for k in present}
    table = HashMap(rt, HASH_CAPACITY)
    failures = sum(not table.insert(int(k), value(int(k))) for k in present[rt.rank :: rt.nprocs])
    rt.barrier()
    queries = np.concatenate([present, absent])[rt.rank :: rt.nprocs].tolist()
    wrong = sum(table.find(k, HashProm.FIND) != oracle.get(k) for k in queries)
    sample = random.Random(rt.rank).sample(queries, 500)
    wrong_atomic = sum(table.find(k) != oracle.get(k) for k in sample)
    rt.barrier()
    return failures, wrong, wrong_atomic, len(queries), table.size()


@pytest.mark.parametrize("nprocs", [1, 2, 4, 8])
@pytest.mark.parametrize("backend", BACKENDS)
def test_hash_oracle(record, backend, nprocs):
    with record(HASH, f"{backend} P={nprocs}") as rec:
        t0 = time.perf_counter()
        res = run(backend, nprocs, _hash_oracle, 11, segment_size=16 << 20)
        secs = time.perf_counter() - t0
        failures = sum(r[0] for r in res)
        wrong = sum(r[1] for r in res)
        wrong_atomic = sum(r[2] for r in res)
        queries = sum(r[3] for r in res)
        load = N_KEYS / HASH_CAPACITY
        rec(failures == 0 or load > 0.9, f"insert failures {failures} at load {load:.2f}")
        rec(wrong == 0 and queries == 2 * N_KEYS, f"{wrong} of {queries} finds disagree with the dict")
        rec(wrong_atomic == 0, f"{wrong_atomic} fully atomic finds disagree")
        rec(res[0][4] == N_KEYS, f"table size {res[0][4]}")
        rec(secs <= TIME_LIMIT, f"wall time {secs:.1f}s")


# -- 3. queue conservation -------------------------------------------------------
TRIALS = 100
ELEMENTS = 100_000  # pushed per configuration, spread evenly over the trials


def _queue_trials(rt, seed):
    per_trial = ELEMENTS // TRIALS
    both = QueueProm.PUSH | QueueProm.POP
    results = []
    for trial in range(TRIALS):
        capacity = random.Random(seed * 1000 + trial).choice([16, 64, 256])
        rng = random.Random((seed * 1000 + trial) * 64 + rt.rank)
        q = CircularQueue(rt, trial % rt.nprocs, capacity)
        lo = rt.rank * per_trial // rt.nprocs
        hi = (rt.rank + 1) * per_trial // rt.nprocs
        todo = [(trial << 32) | i for i in range(lo, hi)]
        pushed, popped = [], []
        while todo:
            if rng.random() < 0.6:
                batch = todo[: rng.randint(1, 8)]
                if q.push(batch, both):
                    pushed += batch
                    del todo[: len(batch)]
            else:
                popped += q.pop(rng.randint(1, 8), both).tolist()
        rt.barrier()
        residual = q.as_vector().tolist() if q.is_host else []
        rt.barrier()
        results.append((pushed, popped, residual))
    return results


@pytest.mark.parametrize("nprocs", [2, 4, 8])
@pytest.mark.parametrize("backend", BACKENDS)
def test_queue_conservation(record, backend, nprocs):
    with record(QUEUE, f"{backend} P={nprocs}") as rec:
        t0 = time.perf_counter()
        res = run(backend, nprocs, _queue_trials, 5)
        secs = time.perf_counter() - t0
        bad, moved, total = [], 0, 0
        for trial in range(TRIALS):
            pushed = collections.Counter(v for r in res for v in r[trial][0])
            out = collections.Counter(v for r in res for v in r[trial][1] + r[trial][2])
            moved += sum(len(r[trial][1]) for r in res)
            total += sum(pushed.values())
            if pushed != out:
                bad.append(trial)
        rec(not bad and total == ELEMENTS,
            f"{TRIALS - len(bad)}/{TRIALS} trials conserve; {total} pushed, {moved} popped concurrently")
        rec(secs <= TIME_LIMIT, f"wall time {secs:.1f}s")


# -- 4 and 5. Bloom filter ---------------------------------------------------------
def _distinct_values(seed, n):
    rng = np.random.default_rng(seed)
    vals = np.unique(rng.integers(1, 1 << 62, size=int(n * 1.1) + 100, dtype=np.int64))
    rng.shuffle(vals)
    return vals[:n]


def _bloom_no_fn(rt):
    vals = _distinct_values(21, N_KEYS)
    dup = vals[:10_000]  # inserted concurrently by every rank
    f = BloomFilter(rt, N_KEYS)
    mine = np.concatenate([vals[10_000:][rt.rank :: rt.nprocs], dup])
    np.random.default_rng(rt.rank).shuffle(mine)
    f.insert_many(mine)
    rt.barrier()
    missing = sum(not f.find(int(v)) for v in vals[rt.rank :: rt.nprocs])
    rt.barrier()
    return missing


def _first_claims(rt, vals):
    f = BloomFilter(rt, 1 << 21)  # far above 10^3 elements: no accidental coverage
    order = list(range(len(vals)))
    random.Random(rt.rank).shuffle(order)
    rt.barrier()
    firsts = [0] * len(vals)
    for i in order:
        firsts[i] = int(not f.insert(int(vals[i])))
    rt.barrier()
    return firsts, f.num_blocks


def _covered(vals, num_blocks, k=4):
    """Values whose bits are all set by the other values (an insert could see them as present)."""
    words = collections.defaultdict(list)
    for v in vals:
        b, m = bloom_bits(mix64(int(v)), num_blocks, k)
        words[b].append(m)
    out = 0
    for v in vals:
        b, m = bloom_bits(mix64(int(v)), num_blocks, k)
        others = 0
        seen_self = False
        for mm in words[b]:
            if mm == m and not seen_self:
                seen_self = True
                continue
            others |= mm
        out += (others & m) == m
    return out


@pytest.mark.parametrize("backend", BACKENDS)
def test_bloom_no_false_negatives(record, backend):
    with record(BLOOM_FN, f"{backend} no false negatives P=4") as rec:
        missing = sum(run(backend, 4, _bloom_no_fn))
        rec(missing == 0, f"{missing} of {N_KEYS} inserted values not found")


@pytest.mark.parametrize("backend", BACKENDS)
def test_bloom_exactly_one_first(record, backend):
    with record(BLOOM_FN, f"{backend} exactly one first P=4") as rec:
        vals = _distinct_values(22, 1000)
        res = run(backend, 4, _first_claims, vals)
        firsts = np.array([r[0] for r in res]).sum(axis=0)
        covered = _covered(vals, res[0][1])
        rec(covered == 0, f"oracle: {covered} values covered by others' bits")
        rec((firsts == 1).all(), f"first claims per value: {collections.Counter(firsts.tolist())}")


def _bloom_fpr(rt):
    vals = _distinct_values(23, 2 * N_KEYS)
    inserted, absent = vals[:N_KEYS], vals[N_KEYS:]
    f = BloomFilter(rt, N_KEYS, 8, 4)
    f.insert_many(inserted[rt.rank :: rt.nprocs])
    rt.barrier()
    hits = sum(f.find(int(v)) for v in absent[rt.rank :: rt.nprocs])
    rt.barrier()
    return hits, f.num_blocks


def _simulated_fpr(num_blocks):
    """Plain-Python filter with the same hashing: a list of words and ``|=``."""
    vals = _distinct_values(23, 2 * N_KEYS)
    words = [0] * num_blocks
    for v in vals[:N_KEYS].tolist():
        b, m = bloom_bits(mix64(v), num_blocks, 4)
        words[b] |= m
    hits = 0
    for v in vals[N_KEYS:].tolist():
        b, m = bloom_bits(mix64(v), num_blocks, 4)
        hits += words[b] & m == m
    return hits / N_KEYS


@pytest.mark.parametrize("backend", BACKENDS)
def test_bloom_false_positive_rate(record, backend):
    with record(BLOOM_FPR, f"{backend} P=4") as rec:
        res = run(backend, 4, _bloom_fpr)
        measured = sum(r[0] for r in res) / N_KEYS
        expected = _simulated_fpr(res[0][1])
        rec(expected > 0 and abs(measured - expected) <= 0.2 * expected,
            f"measured {measured:.5f}, simulation {expected:.5f}")


# -- 6. ISx ----------------------------------------------------------------------------
@pytest.mark.parametrize("nprocs", [1, 2, 4, 8])
@pytest.mark.parametrize("backend", BACKENDS)
def test_isx(record, backend, nprocs):
    with record(ISX, f"{backend} P={nprocs}") as rec:
        n = 1 << 16
        cfg = BenchConfig("isx", backend, nprocs, keys_per_rank=n, message_size=1024, seed=7,
                          segment_size=32 << 20)
        t0 = time.perf_counter()
        res = run_isx(cfg)
        secs = time.perf_counter() - t0
        expect = np.sort(np.concatenate([generate_keys(7, r, nprocs, n) for r in range(nprocs)]))
        got = np.concatenate(res["outputs"])
        rec(np.array_equal(got, expect), f"{len(got)} keys, sorted permutation of the input")
        rec(secs <= TIME_LIMIT, f"wall time {secs:.1f}s")


def _global_items(rt, table):
    """Every entry of ``table`` as one dict; bucket placement depends on insert order."""
    merged = {}
    for part in rt.allgather(list(table.local_items())):
        merged.update(part)
    return merged


# -- 7. buffering ------------------------------------------------------------------------
def _buffer_vs_direct(rt):
    keys, _ = _key_sets(31)
    mine = keys[rt.rank :: rt.nprocs]
    direct = HashMap(rt, HASH_CAPACITY)
    rt.barrier()
    c0 = rt.op_counts()
    for k in mine.tolist():
        direct.insert(k, k ^ 5)
    rt.barrier()
    c1 = rt.op_counts()
    buffered = HashMap(rt, HASH_CAPACITY)
    buf = HashMapBuffer(buffered, 1024, queue_capacity=2 * len(mine) + rt.nprocs * 1024)
    rt.barrier()
    c2 = rt.op_counts()
    buf.insert_many(mine, mine ^ 5)
    buf.flush()
    c3 = rt.op_counts()
    a_direct = rt.allreduce((c1 - c0).A)
    a_buffered = rt.allreduce((c3 - c2).A)
    same = _global_items(rt, direct) == _global_items(rt, buffered)
    return a_direct, a_buffered, same, buf.failed, buf.direct_inserts


@pytest.mark.parametrize("backend", BACKENDS)
def test_buffering_benefit(record, backend):
    with record(BUFFER, f"{backend} P=4") as rec:
        res = run(backend, 4, _buffer_vs_direct, segment_size=16 << 20)
        a_direct, a_buffered = res[0][0], res[0][1]
        ratio = a_direct / max(a_buffered, 1)
        rec(ratio >= 10, f"atomics direct {a_direct}, buffered {a_buffered}, ratio {ratio:.1f}")
        rec(all(r[2] for r in res) and sum(r[3] for r in res) == 0, "tables equal after flush")


# -- 8. k-mer ---------------------------------------------------------------------------------
def _kmer_oracle(cfg):
    allk = np.concatenate([rank_kmers(cfg, r, cfg.nprocs)[0] for r in range(cfg.nprocs)])
    _, counts = np.unique(allk, return_counts=True)
    hist = np.bincount(counts)
    singletons = counts[counts == 1].sum() / len(allk)
    return {c: int(hist[c]) for c in range(2, len(hist)) if hist[c]}, singletons


@pytest.mark.parametrize("backend", BACKENDS)
def test_kmer_differential(record, backend):
    with record(KMER, f"{backend} P=4") as rec:
        base = dict(backend=backend, nprocs=4, message_size=1024, seed=3, k=21, windows=1_000_000)
        t0 = time.perf_counter()
        plain = run_kmer(BenchConfig("kmer", bloom=False, **base))
        bloom = run_kmer(BenchConfig("kmer", bloom=True, **base))
        secs = time.perf_counter() - t0
        oracle, singletons = _kmer_oracle(BenchConfig("kmer", **base))
        rec(plain["histogram"] == bloom["histogram"],
            f"histograms identical over {len(oracle)} count values")
        rec(plain["histogram"] == oracle, "histogram equals a numpy unique-count oracle")
        rec(bloom["table_entries"] < plain["table_entries"],
            f"table entries bloom {bloom['table_entries']} < plain {plain['table_entries']}")
        rec(0.25 <= singletons <= 0.35, f"singleton window fraction {singletons:.3f}")
        rec(secs <= TIME_LIMIT, f"wall time {secs:.1f}s for both modes")


# -- 9. backend equivalence ---------------------------------------------------------------------
def _battery(rt):
    """Container and runtime properties reduced to deterministic verdicts."""
    out = {}
    word = rt.broadcast(rt.alloc(2) if rt.rank == 0 else None)
    rt.barrier()
    tickets = [rt.fetch_and_add(word, 1) for _ in range(100)]
    wins = [rt.compare_and_swap(word + 1, i, i + 1) == i for i in range(50)]
    all_tickets = sorted(t for ts in rt.allgather(tickets) for t in ts)
    out["faa total order"] = all_tickets == list(range(100 * rt.nprocs))
    out["cas winners per round"] = sum(rt.allgather(sum(wins))) == 50

    flags = rt.broadcast(rt.alloc(400) if rt.rank == 1 else None, root=1)
    bad = 0
    if rt.rank == 0:
        for i in range(200):
            rt.rput(flags + 2 * i, [i + 1])
            rt.flush()
            rt.rput(flags + 2 * i + 1, [1])
            rt.flush()
    elif rt.rank == 1:
        for i in range(200):
            wait = rt.backoff("fence flag")
            while rt.local_view(flags + 2 * i + 1, 1)[0] != 1:
                wait.wait()
            bad += int(rt.local_view(flags + 2 * i, 1)[0]) != i + 1
    out["fence soundness"] = rt.allreduce(bad) == 0

    table = HashMap(rt, 1 << 12)
    keys = list(range(rt.rank, 2000, rt.nprocs))
    ok = all(table.insert(k, k * 3) for k in keys)
    rt.barrier()
    found = all(table.find(k, HashProm.FIND) == k * 3 for k in range(2000))
    absent = all(table.find(k) is None for k in range(2000, 2100))
    out["hash oracle"] = bool(rt.allreduce(int(ok and found and absent), "min"))

    q = CircularQueue(rt, 0, 32)
    rng = random.Random(rt.rank)
    pushed, popped = [], []
    for i in range(300):
        if rng.random() < 0.55:
            v = [rt.rank * 10**6 + i]
            if q.push(v):
                pushed += v
        else:
            popped += q.pop(2).tolist()
    rt.barrier()
    residual = q.as_vector().tolist() if rt.rank == 0 else []
    allp = sorted(v for p in rt.allgather(pushed) for v in p)
    allo = sorted(v for p in rt.allgather(popped + residual) for v in p)
    out["queue conservation"] = allp == allo

    fq = FastQueue(rt, rt.nprocs - 1, 4096)
    fq.push(list(range(rt.rank * 100, rt.rank * 100 + 100)))
    rt.barrier()
    got = []
    while len(part := fq.pop(7)):
        got += part.tolist()
    out["fastqueue partition"] = sorted(v for g in rt.allgather(got) for v in g) == list(range(100 * rt.nprocs))

    bloom = BloomFilter(rt, 1 << 16)
    firsts = [int(not bloom.insert(v)) for v in range(200)]
    total = np.sum(rt.allgather(firsts), axis=0)
    out["bloom one first"] = bool((total == 1).all())
    out["bloom bits"] = int(np.bitwise_or.reduce(bloom.local_words())) if bloom.local_blocks else 0
    out["bloom bits"] = rt.allgather(out["bloom bits"])

    buf_table = HashMap(rt, 1 << 12)
    buf = HashMapBuffer(buf_table, 16, queue_capacity=4096)
    for k in keys:
        buf.insert(k, k * 3)
    buf.flush()
    out["buffered table"] = _global_items(rt, buf_table) == _global_items(rt, table)
    out["collectives"] = (rt.allreduce(rt.rank), rt.broadcast("x" * 3000 if rt.rank == 0 else None)[:3])
    return out


@pytest.mark.parametrize("nprocs", [2, 4])
def test_backend_equivalence(record, nprocs):
    with record(EQUIV, f"P={nprocs}") as rec:
        results = {b: run(b, nprocs, _battery) for b in BACKENDS}
        for b, res in results.items():
            verdicts = {k: v for k, v in res[0].items() if isinstance(v, bool)}
            failed = [k for k, v in verdicts.items() if not v]
            rec(not failed, f"{b}: {len(verdicts) - len(failed)}/{len(verdicts)} properties hold {failed or ''}")
        rec(results["threads"] == results["socket"], "threads and socket results identical")
