"""Aggregated hash-table insertion.

Records are grouped by the rank owning their key's first probe bucket.  When
a group reaches ``message_size`` records it is pushed as one block to that
rank's staging :class:`FastQueue`.  :meth:`HashMapBuffer.flush` drains every
staging queue into the table with plain local stores.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Runtime
from .hashmap import HashMap
from .queues import FastQueue


class HashMapBuffer:
    """Buffered inserts into ``table``.  Construction and :meth:`flush` are collective.

    ``combine`` and ``update_only`` are forwarded to every table insert (see
    :meth:`HashMap.insert`).  When a staging queue is full the block is
    inserted directly with the fully atomic protocol instead.
    """

    def __init__(self, table: HashMap, message_size: int = 1024, queue_capacity: int | None = None,
                 combine: Callable | None = None, update_only: bool = False):
        rt: Runtime = table.rt
        self.rt = rt
        self.table = table
        self.message_size = max(1, message_size)
        self.combine = combine
        self.create = not update_only
        ks, vs = table.key_ser, table.val_ser
        self._rec = np.dtype([("k", f"V{ks.cell_size}"), ("v", f"V{vs.cell_size}")])
        cap = queue_capacity or rt.nprocs * self.message_size * 4
        self.queues = [FastQueue(rt, r, cap, self._rec) for r in range(rt.nprocs)]
        self._keys: list[list] = [[] for _ in range(rt.nprocs)]
        self._vals: list[list] = [[] for _ in range(rt.nprocs)]
        self.direct_inserts = 0
        self.failed = 0

    def insert(self, key, value) -> None:
        dest = self.table.home_rank(key)
        keys = self._keys[dest]
        keys.append(key)
        self._vals[dest].append(value)
        if len(keys) >= self.message_size:
            self._send(dest)

    def insert_many(self, keys, values) -> None:
        """``insert`` for each pair, with destinations computed in one pass."""
        keys = np.asarray(keys)
        values = np.asarray(values)
        dests = self.table.home_ranks(keys)
        order = np.argsort(dests, kind="stable")
        bounds = np.searchsorted(dests[order], np.arange(self.rt.nprocs + 1))
        for dest in range(self.rt.nprocs):
            idx = order[bounds[dest] : bounds[dest + 1]]
            if not len(idx):
                continue
            dk, dv = keys[idx].tolist(), values[idx].tolist()
            pk, pv = self._keys[dest], self._vals[dest]
            M = self.message_size
            pos = min(len(dk), M - len(pk))
            pk.extend(dk[:pos])
            pv.extend(dv[:pos])
            if len(pk) < M:
                continue
            self._send(dest)
            while len(dk) - pos >= M:
                self._push_block(dest, dk[pos : pos + M], dv[pos : pos + M])
                pos += M
            self._keys[dest], self._vals[dest] = dk[pos:], dv[pos:]

    def _encode(self, keys, vals) -> bytes:
        rt = self.rt
        ks, vs = self.table.key_ser, self.table.val_ser
        n = len(keys)
        recs = np.empty(n, dtype=self._rec)
        kb = ks.encode_many(keys) if ks.identity else b"".join(ks.pack(rt, k, local=True) for k in keys)
        vb = vs.encode_many(vals) if vs.identity else b"".join(vs.pack(rt, v, local=True) for v in vals)
        recs["k"] = np.frombuffer(kb, dtype=self._rec["k"], count=n)
        recs["v"] = np.frombuffer(vb, dtype=self._rec["v"], count=n)
        return recs.tobytes()

    def _decode(self, raw: bytes, n: int):
        rt = self.rt
        ks, vs = self.table.key_ser, self.table.val_ser
        recs = np.frombuffer(raw, dtype=self._rec, count=n)
        kraw, vraw = recs["k"].tobytes(), recs["v"].tobytes()
        if ks.identity:
            keys = ks.decode_many(kraw, n).tolist()
        else:
            c = ks.cell_size
            keys = [ks.unpack(rt, kraw[i * c : (i + 1) * c]) for i in range(n)]
        if vs.identity:
            vals = vs.decode_many(vraw, n).tolist()
        else:
            c = vs.cell_size
            vals = [vs.unpack(rt, vraw[i * c : (i + 1) * c]) for i in range(n)]
        return keys, vals

    def _send(self, dest: int) -> None:
        """Push every pending record for ``dest``."""
        keys, vals = self._keys[dest], self._vals[dest]
        if keys:
            self._keys[dest], self._vals[dest] = [], []
            self._push_block(dest, keys, vals)

    def _push_block(self, dest: int, keys: list, vals: list) -> None:
        if not self.queues[dest].push_encoded(self._encode(keys, vals), len(keys)):
            # staging queue full: degrade to direct atomic inserts
            for k, v in zip(keys, vals):
                self._insert_atomic(k, v)
            self.direct_inserts += len(keys)

    def _insert_atomic(self, key, value) -> None:
        if not self.table.insert(key, value, combine=self.combine, create=self.create):
            self.failed += self.create

    def flush(self) -> int:
        """Complete every buffered insert on every rank; returns this rank's failures so far.

        Three barriers: after the last blocks are pushed, after the local
        drain, and after records whose probe left the owner rank have been
        inserted atomically.
        """
        rt = self.rt
        for dest in range(rt.nprocs):
            self._send(dest)
        rt.barrier()
        raw, n = self.queues[rt.rank].local_nonatomic_pop(raw=True)
        displaced = []
        if n:
            table = self.table
            for key, value in zip(*self._decode(raw, n)):
                done = table.insert_local(key, value, combine=self.combine, create=self.create)
                if done is None:
                    displaced.append((key, value))
                elif not done:
                    self.failed += self.create
        rt.barrier()
        for key, value in displaced:
            self._insert_atomic(key, value)
        rt.barrier()
        return self.failed
