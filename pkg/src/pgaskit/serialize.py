"""Fixed-size cells for storing arbitrary values in global memory.

A serializer is chosen once per container, from the value type, and fixes how
every value of that container is stored:

* identity serializers (numpy scalar, subarray and structured dtypes, Python
  ``int``/``float``) store the value's bytes directly in the cell, so an
  array of cells can be moved with one bulk transfer;
* variable-length serializers (``str``, ``bytes``, pickled objects) write the
  value to a blob ``{u32 length, bytes}`` in the writer's segment and store
  ``{blob pointer, length}`` in a 16-byte cell.

Blobs are never reclaimed when a cell is overwritten; they live as long as
the segment.  Declaring a dtype byte-copyable is trusted: nothing checks that
a type handed to :class:`IdentitySerializer` really is plain data.
"""

from __future__ import annotations

import pickle
import struct
from typing import Any

import numpy as np

from .core import U8, GlobalPtr, Runtime
from .errors import NotSetError, UsageError
from .kernels import hash_bytes, mix64

_CELL_PTR = struct.Struct("<QQ")
_BLOB_LEN = struct.Struct("<I")


def _round8(n: int) -> int:
    return max(8, (n + 7) & ~7)


class Serializer:
    """Base class; subclasses set ``fixed``, ``identity`` and ``cell_size``."""

    fixed: bool = True
    identity: bool = False
    cell_size: int = 8

    def pack(self, rt: Runtime, value, local: bool = False) -> bytes:
        raise NotImplementedError

    def unpack(self, rt: Runtime, cell) -> Any:
        raise NotImplementedError

    def key_hash(self, value) -> int:
        raise NotImplementedError

    def key_bytes(self, rt: Runtime, cell) -> bytes:
        """Canonical bytes for equality tests on a stored cell."""
        return bytes(cell)

    def value_key_bytes(self, rt: Runtime, value) -> bytes:
        raise NotImplementedError


class IdentitySerializer(Serializer):
    """Stores the raw bytes of a numpy dtype, padded to 8 bytes."""

    identity = True

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        if self.dtype.hasobject:
            raise UsageError(f"dtype {self.dtype} holds Python objects and is not byte-copyable")
        self.cell_size = _round8(self.dtype.itemsize)
        self._pad = bytes(self.cell_size - self.dtype.itemsize)
        self._int_key = self.dtype.kind in "iub" and self.dtype.itemsize <= 8
        # Cell-sized record for bulk copies; same bytes as the dtype when unpadded.
        self.cell_dtype = (self.dtype if not self._pad else
                           np.dtype({"names": ["v"], "formats": [self.dtype], "itemsize": self.cell_size}))

    def __repr__(self):
        return f"IdentitySerializer({self.dtype})"

    def encode(self, value) -> bytes:
        if self.dtype.subdtype is not None:
            base, shape = self.dtype.subdtype
            return np.broadcast_to(np.asarray(value, dtype=base), shape).tobytes() + self._pad
        return np.asarray(value, dtype=self.dtype).tobytes() + self._pad

    def pack(self, rt, value, local=False):
        return self.encode(value)

    def decode(self, cell):
        base = self.dtype
        if self.dtype.subdtype is not None:
            base, shape = self.dtype.subdtype
            return np.frombuffer(bytes(cell[: self.dtype.itemsize]), dtype=base).reshape(shape)
        item = np.frombuffer(cell, dtype=base, count=1)[0]
        return item.item()

    def unpack(self, rt, cell):
        return self.decode(cell)

    def key_hash(self, value) -> int:
        if self._int_key:
            return mix64(int(value))
        return hash_bytes(self.encode(value))

    def value_key_bytes(self, rt, value) -> bytes:
        return self.encode(value)

    # bulk paths: one contiguous buffer, no per-element work
    def encode_many(self, values) -> bytes:
        if not self._pad:
            base = self.dtype.subdtype[0] if self.dtype.subdtype else self.dtype
            return np.ascontiguousarray(values, dtype=base).tobytes()
        buf = np.zeros(len(values), dtype=self.cell_dtype)
        buf["v"] = values
        return buf.tobytes()

    def decode_many(self, data, n: int) -> np.ndarray:
        arr = np.frombuffer(data, dtype=self.cell_dtype, count=n)
        return arr if not self._pad else arr["v"]


class VariableSerializer(Serializer):
    """Values stored out of line in a length-prefixed blob."""

    fixed = False
    cell_size = _CELL_PTR.size

    def encode(self, value) -> bytes:
        raise NotImplementedError

    def decode(self, data: bytes):
        raise NotImplementedError

    def pack(self, rt, value, local=False):
        data = self.encode(value)
        blob = rt.alloc(_BLOB_LEN.size + len(data), U8)
        payload = _BLOB_LEN.pack(len(data)) + data
        if local:
            rt.local_bytes(blob, len(payload))[:] = payload
        else:
            rt.rput(blob, payload)
        return _CELL_PTR.pack(blob.to_word(), len(data))

    def _blob(self, rt, cell) -> bytes:
        word, n = _CELL_PTR.unpack_from(cell, 0)
        if word == 0:
            raise NotSetError("container holds no value")
        ptr = GlobalPtr.from_word(word).byte_offset(_BLOB_LEN.size)
        return bytes(rt.rget_bytes(ptr, n))

    def unpack(self, rt, cell):
        return self.decode(self._blob(rt, cell))

    def key_hash(self, value) -> int:
        return hash_bytes(self.encode(value))

    def key_bytes(self, rt, cell) -> bytes:
        return self._blob(rt, cell)

    def value_key_bytes(self, rt, value) -> bytes:
        return self.encode(value)


class BytesSerializer(VariableSerializer):
    def encode(self, value):
        return bytes(value)

    def decode(self, data):
        return data


class StrSerializer(VariableSerializer):
    def encode(self, value):
        return value.encode("utf-8")

    def decode(self, data):
        return data.decode("utf-8")


class PickleSerializer(VariableSerializer):
    """Any picklable object.  Key hashing uses the pickle bytes."""

    def encode(self, value):
        return pickle.dumps(value, protocol=pickle.HIGHEST_PROTOCOL)

    def decode(self, data):
        return pickle.loads(data)


_REGISTRY: dict[type, Serializer] = {
    int: IdentitySerializer(np.int64),
    float: IdentitySerializer(np.float64),
    bool: IdentitySerializer(np.bool_),
    str: StrSerializer(),
    bytes: BytesSerializer(),
}


def register_serializer(cls: type, serializer: Serializer) -> None:
    """Opt a user type into container storage."""
    _REGISTRY[cls] = serializer


def serializer_for(kind) -> Serializer:
    """Resolve a value type, dtype, or serializer instance to a serializer."""
    if isinstance(kind, Serializer):
        return kind
    if isinstance(kind, type) and kind in _REGISTRY:
        return _REGISTRY[kind]
    try:
        dtype = np.dtype(kind)
    except TypeError:
        raise UsageError(f"no serializer for {kind!r}; call register_serializer first") from None
    if dtype.hasobject:
        raise UsageError(f"no serializer for {kind!r}; call register_serializer first")
    return IdentitySerializer(dtype)


class ObjectContainer:
    """Cells of one serializer, addressed by global pointer."""

    def __init__(self, kind):
        self.ser = serializer_for(kind)
        self.size = self.ser.cell_size

    def set(self, rt: Runtime, ptr: GlobalPtr, value) -> None:
        rt.rput(ptr.cast(U8), self.ser.pack(rt, value))

    def get(self, rt: Runtime, ptr: GlobalPtr):
        return self.ser.unpack(rt, rt.rget_bytes(ptr, self.size))

    def set_many(self, rt: Runtime, ptr: GlobalPtr, values) -> None:
        """Store consecutive cells; one transfer for identity types."""
        if self.ser.identity:
            rt.rput(ptr.cast(U8), self.ser.encode_many(values))
        else:
            rt.rput(ptr.cast(U8), b"".join(self.ser.pack(rt, v) for v in values))

    def get_many(self, rt: Runtime, ptr: GlobalPtr, n: int):
        data = rt.rget_bytes(ptr, n * self.size)
        return self.decode_cells(rt, data, n)

    def encode_cells(self, rt: Runtime, values, local: bool = False) -> bytes:
        if self.ser.identity:
            return self.ser.encode_many(values)
        return b"".join(self.ser.pack(rt, v, local) for v in values)

    def decode_cells(self, rt: Runtime, data, n: int):
        if self.ser.identity:
            return self.ser.decode_many(data, n)
        size = self.size
        return [self.ser.unpack(rt, data[i * size : (i + 1) * size]) for i in range(n)]
