"""Distributed data structures over one-sided remote memory operations."""

from .arrays import Array, DArray
from .backends import BACKENDS, spawn_world
from .bloom import BloomFilter
from .buffer import HashMapBuffer
from .core import ConProm, GlobalPtr, HashProm, OpCounts, QueueProm, Runtime
from .errors import (AllocationError, CapacityError, ConnectionLost, DeadlockError, InitError,
                     NotSetError, PGASError, UsageError, WorldError)
from .hashmap import HashMap
from .queues import CircularQueue, FastQueue
from .serialize import ObjectContainer, register_serializer

__version__ = "0.1.0"

__all__ = [
    "BACKENDS", "AllocationError", "Array", "BloomFilter", "CapacityError", "CircularQueue",
    "ConProm", "ConnectionLost", "DArray", "DeadlockError", "FastQueue", "GlobalPtr", "HashMap",
    "HashMapBuffer", "HashProm", "InitError", "NotSetError", "ObjectContainer", "OpCounts",
    "PGASError", "QueueProm", "Runtime", "UsageError", "WorldError", "register_serializer",
    "spawn_world",
]
