"""Distributed blocked Bloom filter.

The filter is an array of 64-bit words split block-wise across ranks.  An
element's ``k`` bits all fall inside one word, so an insert is one remote
fetch-and-or and its return value says whether every bit was already set.
Concurrent inserts of the same element therefore agree on exactly one "first".
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .core import U64, GlobalPtr, Runtime
from .errors import UsageError
from .kernels import bloom_bits, bloom_bits_array, mix64_array
from .serialize import serializer_for


class BloomFilter:
    """Construction is collective.

    ``expected`` elements at ``bits_per_element`` bits each determine the
    number of 64-bit blocks.
    """

    def __init__(self, rt: Runtime, expected: int, bits_per_element: int = 8, k: int = 4,
                 value_type=int, hash_fn: Callable[[object], int] | None = None):
        if not 1 <= k <= 64:
            raise UsageError("k must be between 1 and 64")
        self.rt = rt
        self.k = k
        self.num_blocks = max(1, math.ceil(max(1, expected) * bits_per_element / 64))
        self.per_rank = -(-self.num_blocks // rt.nprocs)
        ser = serializer_for(value_type)
        self._hash = hash_fn or ser.key_hash
        # integer keys hash as mix64 of the value, which vectorizes
        self._int_keys = hash_fn is None and getattr(ser, "_int_key", False)
        nlocal = max(0, min(self.per_rank, self.num_blocks - rt.rank * self.per_rank))
        self.local_blocks = nlocal
        self._mine = rt.alloc(max(1, nlocal), U64)
        self._bases = rt.allgather(self._mine.offset)

    def locate(self, x) -> tuple[GlobalPtr, int]:
        """Word holding ``x``'s bits, and the bit mask."""
        block, mask = bloom_bits(self._hash(x), self.num_blocks, self.k)
        rank = block // self.per_rank
        return GlobalPtr(rank, self._bases[rank] + (block - rank * self.per_rank) * 8, U64), mask

    def insert(self, x) -> bool:
        """Add ``x``; True if it was (probably) present already."""
        ptr, mask = self.locate(x)
        return self.rt.fetch_and_or(ptr, mask) & mask == mask

    def find(self, x) -> bool:
        ptr, mask = self.locate(x)
        return int(self.rt.rget(ptr)[0]) & mask == mask

    def hashes(self, xs) -> np.ndarray:
        if self._int_keys:
            return mix64_array(np.asarray(xs).astype(np.uint64))
        return np.fromiter((self._hash(x) for x in xs), dtype=np.uint64, count=len(xs))

    def insert_many(self, xs) -> np.ndarray:
        """``insert`` for each element (one A each, pipelined per rank); bool array."""
        n = len(xs)
        present = np.zeros(n, dtype=bool)
        if n == 0:
            return present
        blocks, masks = bloom_bits_array(self.hashes(xs), self.num_blocks, self.k)
        ranks = blocks // self.per_rank
        for r in np.unique(ranks):
            idx = np.flatnonzero(ranks == r)
            r = int(r)
            offs = self._bases[r] + (blocks[idx] - r * self.per_rank) * 8
            m = masks[idx]
            prior = np.array(self.rt.atomic_batch("or", r, offs, m), dtype=np.uint64)
            present[idx] = (prior & m) == m
        return present

    def local_words(self):
        return self.rt.local_view(self._mine, self.local_blocks)

    def memory_bytes(self) -> int:
        return self.num_blocks * 8
