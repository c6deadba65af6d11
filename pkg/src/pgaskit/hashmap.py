"""Distributed open-addressing hash table.

Buckets form one logical array split into equal blocks, one per rank.  Each
bucket is ``{u32 flag, u32 pad, key cell, value cell}``.  The flag's low two
bits hold the bucket state (FREE, RESERVED, READY); bits 2..31 are reader
bits, set by fully atomic finds so that a writer cannot reserve a bucket
while it is being read.
"""

from __future__ import annotations

import random
import struct
from typing import Callable, Iterator

import numpy as np

from .core import U8, U32, GlobalPtr, HashProm, Runtime
from .errors import CapacityError, UsageError
from .kernels import mix64_array
from .serialize import serializer_for

FREE, RESERVED, READY = 0, 1, 2
STATE_MASK = 3
_FLAG = struct.Struct("<I")
_DEFAULT = HashProm.FIND | HashProm.INSERT
_BIT_RETRIES = 8


def probe(h: int, i: int, capacity: int) -> int:
    """Bucket visited at step ``i``; a permutation of all buckets for i < capacity."""
    return (h + ((i + i * i) >> 1)) & (capacity - 1)


class HashMap:
    """Fixed-capacity distributed hash map.  Construction is collective.

    ``insert`` and ``find`` take a :class:`HashProm` promise naming which
    operations may run concurrently with the call:

    * ``FIND | INSERT`` (default): fully atomic protocol.
    * ``FIND``: only finds overlap, so a find is a single read of the bucket.
    * ``LOCAL``: only valid for ``insert`` when nothing else touches the table;
      buckets on the caller's rank are written with plain stores.
    """

    def __init__(self, rt: Runtime, capacity: int, key_type=int, value_type=int,
                 hash_fn: Callable[[object], int] | None = None):
        self.rt = rt
        self.key_ser = serializer_for(key_type)
        self.val_ser = serializer_for(value_type)
        self._hash = hash_fn or self.key_ser.key_hash
        self._int_keys = hash_fn is None and getattr(self.key_ser, "_int_key", False)
        self.key_size = self.key_ser.cell_size
        self.val_size = self.val_ser.cell_size
        self.bucket_size = 8 + self.key_size + self.val_size
        self._rng = random.Random(rt.rank)
        self._allocate(capacity)

    def _allocate(self, capacity: int) -> None:
        if capacity < 1 or capacity & (capacity - 1):
            raise UsageError(f"capacity must be a power of two, got {capacity}")
        rt = self.rt
        self.capacity = capacity
        self.block = -(-capacity // rt.nprocs)
        nlocal = max(0, min(self.block, capacity - rt.rank * self.block))
        self.local_buckets = nlocal
        self._mine = rt.alloc(max(1, nlocal) * self.bucket_size, U8)
        self._bases = rt.allgather(self._mine.offset)

    # -- addressing ---------------------------------------------------------
    def owner(self, slot: int) -> int:
        return slot // self.block

    def home_rank(self, key) -> int:
        """Rank owning the first bucket probed for ``key``."""
        return (self._hash(key) & (self.capacity - 1)) // self.block

    def hashes(self, keys) -> np.ndarray:
        if self._int_keys:
            return mix64_array(np.asarray(keys).astype(np.uint64))
        return np.fromiter((self._hash(k) for k in keys), dtype=np.uint64, count=len(keys))

    def home_ranks(self, keys) -> np.ndarray:
        """``home_rank`` of each key, vectorized."""
        h = self.hashes(keys) & np.uint64(self.capacity - 1)
        return (h // np.uint64(self.block)).astype(np.int64)

    def _bucket(self, slot: int) -> tuple[int, int]:
        rank = slot // self.block
        return rank, self._bases[rank] + (slot - rank * self.block) * self.bucket_size

    # -- insert -------------------------------------------------------------
    def insert(self, key, value, promise: HashProm = _DEFAULT, *,
               combine: Callable | None = None, create: bool = True) -> bool:
        """Store ``value`` under ``key``; False when the table is full.

        ``combine(old, new)`` replaces an existing value with the combination
        instead of overwriting it, under the bucket reservation.  With
        ``create=False`` only existing keys are updated and a missing key
        returns False.
        """
        if promise & HashProm.LOCAL:
            done = self.insert_local(key, value, combine=combine, create=create)
            if done is not None:
                return done
        return self._insert_atomic(self._hash(key), key, value, combine, create)

    def _insert_atomic(self, h, key, value, combine, create) -> bool:
        rt = self.rt
        ks, vs = self.key_ser, self.val_ser
        want = None
        for i in range(self.capacity):
            rank, off = self._bucket(probe(h, i, self.capacity))
            flag = GlobalPtr(rank, off, U32)
            cells = GlobalPtr(rank, off + 8, U8)
            wait = None
            while True:
                if create:
                    prior = rt.compare_and_swap(flag, FREE, RESERVED)
                    if prior == FREE:
                        rt.rput(cells, ks.pack(rt, key) + vs.pack(rt, value))
                        rt.flush()
                        rt.fetch_and_xor(flag, RESERVED ^ READY)
                        return True
                else:
                    prior = rt.compare_and_swap(flag, READY, RESERVED)
                    if prior & STATE_MASK == FREE:
                        return False
                if prior & STATE_MASK == READY:
                    if create:
                        prior = rt.compare_and_swap(flag, READY, RESERVED)
                    if prior == READY:
                        if want is None:
                            want = ks.value_key_bytes(rt, key)
                        if combine is None:
                            stored = rt.rget_bytes(cells, self.key_size)
                        else:
                            stored = rt.rget_bytes(cells, self.key_size + self.val_size)
                        if ks.key_bytes(rt, stored[: self.key_size]) == want:
                            new = value
                            if combine is not None:
                                new = combine(vs.unpack(rt, stored[self.key_size:]), value)
                            rt.rput(cells.byte_offset(self.key_size), vs.pack(rt, new))
                            rt.flush()
                            rt.fetch_and_xor(flag, RESERVED ^ READY)
                            return True
                        rt.fetch_and_xor(flag, RESERVED ^ READY)
                        break
                # reserved by a writer, or held by readers: wait and retry
                if wait is None:
                    wait = rt.backoff(f"hash bucket {rank}:{off}")
                wait.wait()
        return False

    def insert_local(self, key, value, *, combine=None, create: bool = True):
        """Plain-store insert into this rank's block; None when the probe leaves it.

        Requires that no other operation touches the table meanwhile.
        """
        h = self._hash(key)
        rt = self.rt
        seg = rt.segment
        ks, vs = self.key_ser, self.val_ser
        kb = None
        for i in range(self.capacity):
            rank, off = self._bucket(probe(h, i, self.capacity))
            if rank != rt.rank:
                return None
            state = _FLAG.unpack_from(seg, off)[0] & STATE_MASK
            kpos = off + 8
            vpos = kpos + self.key_size
            if state == FREE:
                if not create:
                    return False
                seg[kpos:vpos] = ks.pack(rt, key, local=True)
                seg[vpos : vpos + self.val_size] = vs.pack(rt, value, local=True)
                _FLAG.pack_into(seg, off, READY)
                return True
            if state != READY:
                raise UsageError("local insert found a reserved bucket; the LOCAL promise was broken")
            if kb is None:
                kb = ks.value_key_bytes(rt, key)
            if ks.key_bytes(rt, seg[kpos:vpos]) == kb:
                if combine is not None:
                    value = combine(vs.unpack(rt, seg[vpos : vpos + self.val_size]), value)
                seg[vpos : vpos + self.val_size] = vs.pack(rt, value, local=True)
                return True
        return False

    # -- find ---------------------------------------------------------------
    def find(self, key, promise: HashProm = _DEFAULT, default=None):
        """Value stored under ``key``, or ``default`` when absent."""
        h = self._hash(key)
        if promise & HashProm.INSERT:
            return self._find_atomic(h, key, default)
        return self._find_read(h, key, default)

    def _find_read(self, h, key, default):
        rt = self.rt
        ks = self.key_ser
        want = ks.value_key_bytes(rt, key)
        kend = 8 + self.key_size
        for i in range(self.capacity):
            rank, off = self._bucket(probe(h, i, self.capacity))
            data = rt.rget_bytes(GlobalPtr(rank, off, U8), self.bucket_size)
            state = _FLAG.unpack_from(data, 0)[0] & STATE_MASK
            if state == FREE:
                return default
            if state == READY and ks.key_bytes(rt, data[8:kend]) == want:
                return self.val_ser.unpack(rt, data[kend:])
        return default

    def _find_atomic(self, h, key, default):
        rt = self.rt
        ks = self.key_ser
        want = ks.value_key_bytes(rt, key)
        rng = self._rng
        for i in range(self.capacity):
            rank, off = self._bucket(probe(h, i, self.capacity))
            flag = GlobalPtr(rank, off, U32)
            wait = None
            tries = 0
            while True:
                bit = 1 << rng.randrange(2, 32)
                prior = rt.fetch_and_or(flag, bit)
                if not prior & bit:
                    break
                tries += 1
                if tries >= _BIT_RETRIES:
                    if wait is None:
                        wait = rt.backoff(f"read bit on {rank}:{off}")
                    wait.wait()
            # holding a read bit: the bucket cannot be reserved from READY
            while prior & STATE_MASK == RESERVED:
                if wait is None:
                    wait = rt.backoff(f"reserved bucket {rank}:{off}")
                wait.wait()
                prior = rt.fetch_and_or(flag, 0)
            if prior & STATE_MASK == FREE:
                rt.fetch_and_and(flag, ~bit & 0xFFFFFFFF)
                return default
            data = rt.rget_bytes(GlobalPtr(rank, off + 8, U8), self.key_size + self.val_size)
            rt.fetch_and_and(flag, ~bit & 0xFFFFFFFF)
            if ks.key_bytes(rt, data[: self.key_size]) == want:
                return self.val_ser.unpack(rt, data[self.key_size:])
        return default

    # -- whole-table operations --------------------------------------------
    def local_items(self) -> Iterator[tuple]:
        """READY entries stored in this rank's block (plain local reads)."""
        rt = self.rt
        seg = rt.segment
        base = self._mine.offset
        kend = 8 + self.key_size
        for j in range(self.local_buckets):
            off = base + j * self.bucket_size
            if _FLAG.unpack_from(seg, off)[0] & STATE_MASK == READY:
                cell = seg[off : off + self.bucket_size]
                yield (self.key_ser.unpack(rt, cell[8:kend]), self.val_ser.unpack(rt, cell[kend:]))

    def local_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(keys, values) arrays of this rank's READY entries; byte-copyable types only."""
        ks, vs = self.key_ser, self.val_ser
        if not (ks.identity and vs.identity):
            raise UsageError("local_arrays needs byte-copyable key and value types")
        rec = np.dtype({"names": ["flag", "k", "v"],
                        "formats": [np.uint32, ks.cell_dtype, vs.cell_dtype],
                        "offsets": [0, 8, 8 + self.key_size], "itemsize": self.bucket_size})
        buckets = np.frombuffer(self.rt.segment, dtype=rec, count=self.local_buckets,
                                offset=self._mine.offset)
        ready = buckets[(buckets["flag"] & STATE_MASK) == READY]
        keys, vals = ready["k"], ready["v"]
        if ks.cell_dtype is not ks.dtype:
            keys = keys["v"]
        if vs.cell_dtype is not vs.dtype:
            vals = vals["v"]
        return keys.copy(), vals.copy()

    def local_size(self) -> int:
        seg = self.rt.segment
        base = self._mine.offset
        return sum(1 for j in range(self.local_buckets)
                   if _FLAG.unpack_from(seg, base + j * self.bucket_size)[0] & STATE_MASK == READY)

    def size(self) -> int:
        """Number of READY entries across all ranks.  Collective."""
        return self.rt.allreduce(self.local_size())

    def memory_bytes(self) -> int:
        """Bytes of bucket storage across all ranks."""
        return self.capacity * self.bucket_size

    def resize(self, new_capacity: int) -> None:
        """Rehash every entry into a table of ``new_capacity`` buckets.  Collective."""
        rt = self.rt
        entries = list(self.local_items())
        total = rt.allreduce(len(entries))
        if total > new_capacity:
            raise CapacityError(f"cannot resize to {new_capacity} buckets: table holds {total} entries")
        old = self._mine
        self._allocate(new_capacity)
        for key, value in entries:
            if not self.insert(key, value):
                raise CapacityError(f"rehash into {new_capacity} buckets failed")
        rt.barrier()
        rt.dealloc(old)
