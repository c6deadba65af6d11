"""Hashing and sequence kernels, jit-compiled with numba when available.

Set ``PGASKIT_NO_NUMBA=1`` to force the pure-numpy implementations.  Both
paths compute bit-identical results; the scalar helpers (``mix64``,
``bloom_bits``) are plain Python and used on per-operation paths where a jit
call would cost more than it saves.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

MASK64 = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
BLOCK_SALT = 0x9E3779B97F4A7C15
BIT_SALT = 0xD1B54A32D192ED03

try:
    if os.environ.get("PGASKIT_NO_NUMBA", "") not in ("", "0"):
        raise ImportError("disabled by PGASKIT_NO_NUMBA")
    import numba

    USE_NUMBA = True
except ImportError:
    numba = None
    USE_NUMBA = False

BASE_CODES = np.full(256, 4, dtype=np.uint8)
for _i, _b in enumerate(b"ACGT"):
    BASE_CODES[_b] = _i
    BASE_CODES[ord(chr(_b).lower())] = _i


# -- scalar ------------------------------------------------------------------
def mix64(x: int) -> int:
    """splitmix64 finalizer: a bijective 64-bit avalanche."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


def hash_bytes(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def bloom_bits(h: int, num_blocks: int, k: int) -> tuple[int, int]:
    """(block index, k-bit mask) for a 64-bit key hash."""
    block = mix64(h ^ BLOCK_SALT) % num_blocks
    h2 = mix64(h ^ BIT_SALT)
    start = h2 & 63
    step = ((h2 >> 6) & 63) | 1
    mask = 0
    for i in range(k):
        mask |= 1 << ((start + i * step) & 63)
    return block, mask


# -- numpy -------------------------------------------------------------------
def _mix64_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64).copy()
    x ^= x >> np.uint64(30)
    x *= np.uint64(_M1)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_M2)
    x ^= x >> np.uint64(31)
    return x


def _bloom_bits_np(h: np.ndarray, num_blocks: int, k: int):
    h = np.asarray(h, dtype=np.uint64)
    blocks = (_mix64_np(h ^ np.uint64(BLOCK_SALT)) % np.uint64(num_blocks)).astype(np.int64)
    h2 = _mix64_np(h ^ np.uint64(BIT_SALT))
    start = h2 & np.uint64(63)
    step = ((h2 >> np.uint64(6)) & np.uint64(63)) | np.uint64(1)
    masks = np.zeros(len(h), dtype=np.uint64)
    for i in range(k):
        masks |= np.uint64(1) << ((start + np.uint64(i) * step) & np.uint64(63))
    return blocks, masks


def _encode_kmers_np(codes: np.ndarray, k: int):
    codes = np.asarray(codes, dtype=np.uint8)
    n = len(codes) - k + 1
    if n <= 0:
        return np.zeros(0, dtype=np.uint64), np.zeros(0, dtype=bool)
    bad = np.concatenate(([0], np.cumsum(codes > 3)))
    valid = (bad[k:] - bad[:-k]) == 0
    vals = np.where(codes > 3, 0, codes).astype(np.uint64)
    kmers = np.zeros(n, dtype=np.uint64)
    for j in range(k):
        kmers = (kmers << np.uint64(2)) | vals[j : j + n]
    return np.where(valid, kmers, np.uint64(0)), valid


# -- numba -------------------------------------------------------------------
if USE_NUMBA:
    _nb = numba.njit(cache=True, nogil=True)

    @_nb
    def _mix64_scalar_nb(x):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_M1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_M2)
        return x ^ (x >> np.uint64(31))

    @_nb
    def _mix64_nb(x):
        out = np.empty(x.shape[0], dtype=np.uint64)
        for i in range(x.shape[0]):
            out[i] = _mix64_scalar_nb(np.uint64(x[i]))
        return out

    @_nb
    def _bloom_bits_nb(h, num_blocks, k):
        n = h.shape[0]
        blocks = np.empty(n, dtype=np.int64)
        masks = np.zeros(n, dtype=np.uint64)
        nb = np.uint64(num_blocks)
        for i in range(n):
            hv = np.uint64(h[i])
            blocks[i] = np.int64(_mix64_scalar_nb(hv ^ np.uint64(BLOCK_SALT)) % nb)
            h2 = _mix64_scalar_nb(hv ^ np.uint64(BIT_SALT))
            start = h2 & np.uint64(63)
            step = ((h2 >> np.uint64(6)) & np.uint64(63)) | np.uint64(1)
            m = np.uint64(0)
            for j in range(k):
                m |= np.uint64(1) << ((start + np.uint64(j) * step) & np.uint64(63))
            masks[i] = m
        return blocks, masks

    @_nb
    def _encode_kmers_nb(codes, k):
        n = codes.shape[0] - k + 1
        if n <= 0:
            return np.zeros(0, dtype=np.uint64), np.zeros(0, dtype=np.bool_)
        kmers = np.zeros(n, dtype=np.uint64)
        valid = np.zeros(n, dtype=np.bool_)
        mask = (np.uint64(1) << np.uint64(2 * k)) - np.uint64(1) if k < 32 else ~np.uint64(0)
        cur = np.uint64(0)
        since_bad = 0
        for i in range(codes.shape[0]):
            c = codes[i]
            if c > 3:
                since_bad = 0
                cur = np.uint64(0)
            else:
                since_bad += 1
                cur = ((cur << np.uint64(2)) | np.uint64(c)) & mask
            j = i - k + 1
            if j >= 0 and since_bad >= k:
                kmers[j] = cur
                valid[j] = True
        return kmers, valid

    mix64_array = _mix64_nb
    bloom_bits_array = _bloom_bits_nb
    encode_kmers = _encode_kmers_nb
else:
    mix64_array = _mix64_np
    bloom_bits_array = _bloom_bits_np
    encode_kmers = _encode_kmers_np


def implementations() -> dict:
    """Every available implementation of each batch kernel, keyed by path name."""
    impls = {"numpy": {"mix64": _mix64_np, "bloom_bits": _bloom_bits_np, "encode_kmers": _encode_kmers_np}}
    if USE_NUMBA:
        impls["numba"] = {"mix64": _mix64_nb, "bloom_bits": _bloom_bits_nb, "encode_kmers": _encode_kmers_nb}
    return impls


def sequence_codes(seq: str | bytes) -> np.ndarray:
    """ACGT -> 0..3, anything else -> 4."""
    if isinstance(seq, str):
        seq = seq.encode("ascii", "replace")
    return BASE_CODES[np.frombuffer(seq, dtype=np.uint8)]


def decode_kmer(code: int, k: int) -> str:
    return "".join("ACGT"[(code >> (2 * (k - 1 - i))) & 3] for i in range(k))
