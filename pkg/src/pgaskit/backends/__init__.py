"""Transports implementing the backend contract."""

from . import socket, threads
from .base import Backend

BACKENDS = ("threads", "socket")


def spawn_world(backend: str, nprocs: int, segment_size: int, rank_main, *args, **kwargs) -> list:
    """Run ``rank_main(runtime, *args, **kwargs)`` on every rank of a fresh world."""
    if backend == "threads":
        return threads.spawn_world(nprocs, segment_size, rank_main, *args, **kwargs)
    if backend == "socket":
        return socket.spawn_world(nprocs, segment_size, rank_main, *args, **kwargs)
    raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")


__all__ = ["BACKENDS", "Backend", "spawn_world", "socket", "threads"]
