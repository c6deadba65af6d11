"""Multi-process backend over TCP.

Each rank owns its segment and runs one agent thread that answers READ, WRITE
and atomic requests from peers, emulating one-sided RDMA: the target's
application thread never participates.  Ranks form a full mesh with one TCP
connection per pair; both directions share it, so the agent also routes
responses back to the waiting application thread.

Atomics (remote or local) are applied under one per-segment lock, which gives
every word a total order.  Requests are synchronous: one outstanding request
per rank per peer.
"""

from __future__ import annotations

import multiprocessing as mp
import multiprocessing.connection as mpc
import os
import queue
import selectors
import socket
import struct
import sys
import threading
import time
import traceback

from ..core import Runtime
from ..errors import ConnectionLost, InitError, UsageError, WorldError
from . import wire
from .base import Backend, atomic_on_buffer

SWITCH_INTERVAL = 0.001
# Most requests kept in flight by one batched call.
_PIPELINE = 256
_WORD = {4: struct.Struct("<I"), 8: struct.Struct("<Q")}


def parse_peers(text: str) -> list[tuple[str, int]]:
    """``"host:port,host:port"`` -> ``[(host, port), ...]``."""
    peers = []
    for item in text.split(","):
        host, _, port = item.strip().rpartition(":")
        if not host or not port.isdigit():
            raise UsageError(f"bad peer address {item!r}; expected host:port")
        peers.append((host, int(port)))
    return peers


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionLost("peer closed the connection during handshake")
        buf += chunk
    return bytes(buf)


def _recv_frame(sock: socket.socket):
    op, rank, offset, length = wire.HEADER.unpack(_recv_exact(sock, wire.HEADER.size))
    payload = _recv_exact(sock, wire.payload_size(op, length))
    return op, rank, offset, length, payload


def _tune(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


def make_listener(host: str, port: int) -> socket.socket:
    lst = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    lst.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        lst.bind((host, port))
    except OSError as exc:
        lst.close()
        raise InitError(f"cannot bind {host}:{port}: {exc}") from exc
    lst.listen(128)
    return lst


class SocketBackend(Backend):
    """One rank's endpoint: listener, peer table and memory agent."""

    def __init__(self, rank: int, peers: list[tuple[str, int]], segment_size: int,
                 watchdog: float = 10.0, timeout: float = 30.0, listener: socket.socket | None = None):
        super().__init__(rank, len(peers), segment_size, watchdog)
        if not 0 <= rank < len(peers):
            raise InitError(f"rank {rank} not in peer list of {len(peers)}")
        self.peers = peers
        self.timeout = timeout
        self._seg = bytearray(segment_size)
        self._lock = threading.Lock()
        self._socks: dict[int, socket.socket] = {}
        self._send_locks: dict[int, threading.Lock] = {}
        self._responses: dict[int, queue.SimpleQueue] = {}
        self._lost: set[int] = set()
        self._goodbyes: set[int] = set()
        self._hint = threading.Event()
        self._stopping = False
        self._listener = listener or make_listener(*peers[rank])
        try:
            self._connect_mesh()
        except BaseException:
            self._close_all()
            raise
        self._agent = threading.Thread(target=self._serve, name=f"agent-{rank}", daemon=True)
        self._agent.start()

    # -- bring-up -----------------------------------------------------------
    def _connect_mesh(self) -> None:
        deadline = time.monotonic() + self.timeout
        for peer in range(self.rank):
            sock = self._dial(peer, deadline)
            sock.sendall(wire.frame(wire.HELLO, self.rank, self.segment_size, 0))
            op, _, offset, _, payload = _recv_frame(sock)
            if op == wire.ERROR | wire.RESPONSE:
                raise InitError(f"rank {peer} refused connection: {payload.decode()}")
            if offset != self.segment_size:
                raise InitError(f"segment size mismatch with rank {peer}: {offset} != {self.segment_size}")
            self._adopt(peer, sock)
        self._listener.settimeout(0.2)
        while len(self._socks) < self.nprocs - 1:
            if time.monotonic() > deadline:
                raise InitError(f"rank {self.rank}: timed out waiting for peers to connect")
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            sock.settimeout(max(0.1, deadline - time.monotonic()))
            op, peer, offset, _, _ = _recv_frame(sock)
            if op != wire.HELLO or not self.rank < peer < self.nprocs or peer in self._socks:
                sock.close()
                raise InitError(f"rank {self.rank}: unexpected handshake from rank {peer}")
            if offset != self.segment_size:
                msg = f"segment size {offset} != {self.segment_size}".encode()
                sock.sendall(wire.frame(wire.ERROR | wire.RESPONSE, self.rank, 0, len(msg), msg))
                sock.close()
                raise InitError(f"segment size mismatch with rank {peer}: {offset} != {self.segment_size}")
            sock.sendall(wire.frame(wire.HELLO | wire.RESPONSE, self.rank, self.segment_size, 0))
            self._adopt(peer, sock)

    def _dial(self, peer: int, deadline: float) -> socket.socket:
        host, port = self.peers[peer]
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
                return sock
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise InitError(f"rank {self.rank}: cannot reach rank {peer} at {host}:{port}: {exc}") from exc
                time.sleep(0.05)

    def _adopt(self, peer: int, sock: socket.socket) -> None:
        sock.settimeout(None)
        _tune(sock)
        self._socks[peer] = sock
        self._send_locks[peer] = threading.Lock()
        self._responses[peer] = queue.SimpleQueue()

    @property
    def connection_count(self) -> int:
        return len(self._socks)

    # -- agent --------------------------------------------------------------
    def _serve(self) -> None:
        sel = selectors.DefaultSelector()
        readers = {}
        for peer, sock in self._socks.items():
            sel.register(sock, selectors.EVENT_READ, peer)
            readers[peer] = wire.FrameReader()
        while not self._stopping and readers:
            for key, _ in sel.select(timeout=0.2):
                peer = key.data
                try:
                    data = key.fileobj.recv(1 << 16)
                except OSError:
                    data = b""
                if not data:
                    sel.unregister(key.fileobj)
                    del readers[peer]
                    if peer not in self._goodbyes:
                        self._lost.add(peer)
                        self._responses[peer].put(None)
                    continue
                for frm in readers[peer].feed(data):
                    self._dispatch(peer, frm)
        sel.close()

    def _dispatch(self, peer: int, frm) -> None:
        op, _, offset, length, payload = frm
        if op & wire.RESPONSE:
            self._responses[peer].put(frm)
            return
        if op == wire.BARRIER_HINT:
            self._hint.set()
            return
        if op == wire.GOODBYE:
            self._goodbyes.add(peer)
            return
        try:
            reply = self._apply(op, offset, length, payload)
        except UsageError as exc:
            msg = str(exc).encode()
            reply = wire.frame(wire.ERROR | wire.RESPONSE, self.rank, offset, len(msg), msg)
        try:
            with self._send_locks[peer]:
                self._socks[peer].sendall(reply)
        except OSError:
            self._lost.add(peer)

    def _apply(self, op: int, offset: int, length: int, payload: bytes) -> bytes:
        seg = self._seg
        if op == wire.READ:
            self._bounds(offset, length)
            data = seg[offset : offset + length]
            return wire.frame(op | wire.RESPONSE, self.rank, offset, length, data)
        if op == wire.WRITE:
            self._bounds(offset, length)
            seg[offset : offset + length] = payload
            return wire.frame(op | wire.RESPONSE, self.rank, offset, 0)
        key = wire.OPCODE_ATOMICS.get(op)
        if key is None:
            raise UsageError(f"unknown opcode {op:#x}")
        kind, width = key
        self._bounds(offset, width)
        word = _WORD[width]
        a = word.unpack_from(payload, 0)[0]
        b = word.unpack_from(payload, width)[0] if kind == "cas" else 0
        with self._lock:
            prior = atomic_on_buffer(seg, kind, width, offset, a, b)
        return wire.frame(op | wire.RESPONSE, self.rank, offset, width, word.pack(prior))

    def _bounds(self, offset: int, n: int) -> None:
        if offset < 0 or offset + n > self.segment_size:
            raise UsageError(f"access [{offset}, {offset + n}) outside segment of {self.segment_size} bytes")

    # -- client side --------------------------------------------------------
    def _request(self, peer: int, msg: bytes, count: int = 0):
        """Send ``msg`` and wait for its reply; with ``count`` > 0, a list of that many replies."""
        if peer in self._lost:
            raise ConnectionLost(f"rank {self.rank}: connection to rank {peer} lost")
        try:
            with self._send_locks[peer]:
                self._socks[peer].sendall(msg)
        except OSError as exc:
            self._lost.add(peer)
            raise ConnectionLost(f"rank {self.rank}: connection to rank {peer} lost: {exc}") from exc
        replies = [self._reply(peer) for _ in range(max(count, 1))]
        return replies if count else replies[0]

    def _reply(self, peer: int):
        try:
            frm = self._responses[peer].get(timeout=self.timeout)
        except queue.Empty:
            raise ConnectionLost(f"rank {self.rank}: no reply from rank {peer} in {self.timeout}s") from None
        if frm is None:
            raise ConnectionLost(f"rank {self.rank}: connection to rank {peer} lost")
        if frm[0] == wire.ERROR | wire.RESPONSE:
            raise UsageError(f"rank {peer} rejected request: {frm[4].decode()}")
        return frm

    def atomic_many(self, op, width, rank, offsets, operands):
        if rank == self.rank or op not in self.native_atomics or op == "cas":
            return super().atomic_many(op, width, rank, offsets, operands)
        word = _WORD[width]
        mask = (1 << (8 * width)) - 1
        code = wire.ATOMIC_OPCODES[(op, width)]
        out = []
        for lo in range(0, len(offsets), _PIPELINE):
            batch = range(lo, min(lo + _PIPELINE, len(offsets)))
            msg = b"".join(wire.frame(code, self.rank, offsets[i], width, word.pack(operands[i] & mask))
                           for i in batch)
            for frm in self._request(rank, msg, len(batch)):
                out.append(word.unpack(frm[4])[0])
        return out

    def read(self, rank, offset, nbytes):
        if rank == self.rank:
            return self._seg[offset : offset + nbytes]
        out = bytearray()
        pos = offset
        end = offset + nbytes
        while True:
            n = min(wire.CHUNK, end - pos)
            out += self._request(rank, wire.frame(wire.READ, self.rank, pos, n))[4]
            pos += n
            if pos >= end:
                return out

    def write(self, rank, offset, data):
        if rank == self.rank:
            self._seg[offset : offset + len(data)] = data
            return
        view = memoryview(data)
        pos = 0
        while True:
            chunk = view[pos : pos + wire.CHUNK]
            self._request(rank, wire.frame(wire.WRITE, self.rank, offset + pos, len(chunk), chunk))
            pos += len(chunk)
            if pos >= len(view):
                return

    def _native_atomic(self, op, width, rank, offset, a, b):
        if rank == self.rank:
            with self._lock:
                return atomic_on_buffer(self._seg, op, width, offset, a, b)
        word = _WORD[width]
        mask = (1 << (8 * width)) - 1
        payload = word.pack(a & mask)
        if op == "cas":
            payload += word.pack(b & mask)
        code = wire.ATOMIC_OPCODES[(op, width)]
        frm = self._request(rank, wire.frame(code, self.rank, offset, len(payload), payload))
        return word.unpack(frm[4])[0]

    def local_segment(self):
        return self._seg

    def check_health(self):
        if self._lost:
            raise ConnectionLost(f"rank {self.rank}: lost connection to rank(s) {sorted(self._lost)}")

    def wait_hint(self, delay):
        self._hint.wait(delay)
        self._hint.clear()

    def notify_barrier(self):
        msg = wire.frame(wire.BARRIER_HINT, self.rank, 0, 0)
        for peer, sock in self._socks.items():
            try:
                with self._send_locks[peer]:
                    sock.sendall(msg)
            except OSError:
                self._lost.add(peer)

    def finalize(self):
        self.barrier()
        msg = wire.frame(wire.GOODBYE, self.rank, 0, 0)
        for peer, sock in self._socks.items():
            with self._send_locks[peer]:
                sock.sendall(msg)
        # Peers may still be polling our barrier word until they say goodbye.
        deadline = time.monotonic() + self.timeout
        while len(self._goodbyes | self._lost) < len(self._socks) and time.monotonic() < deadline:
            time.sleep(0.001)
        self._stopping = True
        self._agent.join(timeout=2.0)
        self._close_all()

    def _close_all(self) -> None:
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass
        self._listener.close()


def run_rank(rank: int, peers, segment_size: int, rank_main, *args,
             watchdog: float = 10.0, timeout: float = 30.0, listener=None, **kwargs):
    """Bring up one socket rank, run ``rank_main(runtime, ...)``, tear down."""
    # The agent thread must get the GIL promptly while the application computes.
    sys.setswitchinterval(SWITCH_INTERVAL)
    backend = SocketBackend(rank, peers, segment_size, watchdog, timeout, listener)
    rt = Runtime(backend)
    backend.barrier()
    result = rank_main(rt, *args, **kwargs)
    rt.finalize()
    return result


def _child(rank, pipe, host, segment_size, rank_main, args, kwargs, watchdog, timeout):
    try:
        listener = make_listener(host, 0)
        pipe.send(listener.getsockname()[1])
        peers = pipe.recv()
        result = run_rank(rank, peers, segment_size, rank_main, *args,
                          watchdog=watchdog, timeout=timeout, listener=listener, **kwargs)
        pipe.send(("ok", result))
    except BaseException:  # noqa: BLE001 - shipped to the parent
        try:
            pipe.send(("err", traceback.format_exc()))
        except Exception:  # noqa: BLE001
            pass
    finally:
        pipe.close()


def spawn_world(nprocs: int, segment_size, rank_main, *args, watchdog: float = 10.0,
                timeout: float = 30.0, host: str = "127.0.0.1", **kwargs) -> list:
    """Fork ``nprocs`` processes on this host and run one rank in each.

    ``segment_size`` may be a list to give ranks different sizes (which makes
    bring-up fail, as it must).  Returns per-rank results; raises
    :class:`WorldError` if any rank fails or dies.
    """
    sizes = list(segment_size) if isinstance(segment_size, (list, tuple)) else [segment_size] * nprocs
    ctx = mp.get_context("fork")
    procs, pipes = [], []
    for rank in range(nprocs):
        parent, child = ctx.Pipe()
        p = ctx.Process(target=_child, name=f"pgas-rank-{rank}",
                        args=(rank, child, host, sizes[rank], rank_main, args, kwargs, watchdog, timeout))
        p.daemon = True
        p.start()
        child.close()
        procs.append(p)
        pipes.append(parent)
    failures: dict[int, str] = {}
    results: list = [None] * nprocs
    try:
        ports = [pipe.recv() for pipe in pipes]
        peers = [(host, port) for port in ports]
        for pipe in pipes:
            pipe.send(peers)
        pending = dict(enumerate(pipes))
        while pending:
            ready = mpc.wait(list(pending.values()), timeout=1.0)
            for pipe in ready:
                rank = next(r for r, p in pending.items() if p is pipe)
                del pending[rank]
                try:
                    status, value = pipe.recv()
                except EOFError:
                    procs[rank].join(timeout=1.0)
                    failures[rank] = f"process exited with code {procs[rank].exitcode} before reporting"
                    continue
                if status == "ok":
                    results[rank] = value
                else:
                    failures[rank] = value
    finally:
        for p in procs:
            p.join(timeout=5.0)
            if p.is_alive():
                p.kill()
                p.join()
        for pipe in pipes:
            pipe.close()
    if failures:
        raise WorldError(failures)
    return results


def kill_self() -> None:
    """Terminate this rank abruptly (failure-path tests)."""
    os._exit(3)
