"""TCP transport between worker processes.

Each rank listens on its own endpoint, connects to every lower rank and
accepts every higher rank. Frames are::

    u64 sequence number | u8 collective tag | snapshot record

where the snapshot record's path field carries the shape/dtype descriptor
of the tensor the collective operates on. A reader thread per peer drains
its socket into an inbox queue, so sends never wait on the peer's progress.
"""

from __future__ import annotations

import io
import multiprocessing as mp
import queue
import socket
import struct
import threading
import time
import traceback

import numpy as np

from .. import tensor as T
from .communicator import (
    DEFAULT_TIMEOUT,
    Communicator,
    CommunicatorError,
    CommunicatorTimeout,
    Message,
    RankCollisionError,
)

_MAGIC = 0x44425255
_HELLO = struct.Struct("<III")
_FRAME = struct.Struct("<QB")
_ACK_OK, _ACK_SIZE_MISMATCH, _ACK_COLLISION = 1, 0, 2
# wire-only dtype tag for integer payloads such as labels and indices
_WIRE_DTYPES = {np.dtype(np.int64): 2}
_WIRE_TAGS = {2: np.dtype(np.int64)}


def parse_endpoints(endpoints) -> list[tuple[str, int]]:
    if isinstance(endpoints, str):
        endpoints = [e for e in endpoints.split(",") if e]
    out = []
    for e in endpoints:
        if isinstance(e, tuple):
            out.append((e[0], int(e[1])))
            continue
        host, _, port = e.rpartition(":")
        out.append((host or "127.0.0.1", int(port)))
    return out


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def encode_frame(message: Message) -> bytes:
    buf = io.BytesIO()
    buf.write(_FRAME.pack(message.seq, message.tag))
    T.write_snapshot(buf, [(message.desc, message.payload)], extra_tags=_WIRE_DTYPES)
    return buf.getvalue()


def decode_frame(stream) -> Message:
    head = stream.read(_FRAME.size)
    if len(head) != _FRAME.size:
        raise ConnectionError("peer closed the connection")
    seq, tag = _FRAME.unpack(head)
    desc, payload = next(T.read_snapshot(stream, extra_tags=_WIRE_TAGS))
    return Message(seq, tag, desc, payload)


class TCPCommunicator(Communicator):
    transport = "tcp"

    def __init__(self, rank: int, size: int, endpoints, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, size, timeout)
        addrs = parse_endpoints(endpoints)
        if len(addrs) != size:
            raise ValueError(f"{len(addrs)} endpoints given for {size} ranks")
        self._socks: dict[int, socket.socket] = {}
        self._send_locks: dict[int, threading.Lock] = {}
        self._readers: list[threading.Thread] = []
        self._closed = False
        deadline = time.monotonic() + timeout

        try:
            listener = socket.create_server(addrs[rank])
        except OSError as e:
            raise RankCollisionError(f"rank {rank}: cannot listen on {addrs[rank]}: {e}") from None
        self._listener = listener
        try:
            for peer in range(rank):
                self._connect(peer, addrs[peer], deadline)
            self._accept_all(deadline)
        except BaseException:
            self.close()
            raise

        for peer, sock in self._socks.items():
            sock.settimeout(None)
            self._inbox[peer] = queue.Queue()
            reader = threading.Thread(target=self._read_loop, args=(peer, sock), daemon=True)
            reader.start()
            self._readers.append(reader)
        self.barrier()

    def _connect(self, peer: int, addr, deadline: float) -> None:
        note = "no answer"
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise CommunicatorTimeout(f"rank {self.rank}: could not reach rank {peer} at {addr} ({note})")
            try:
                sock = socket.create_connection(addr, timeout=min(remaining, 1.0))
                sock.settimeout(remaining)
                sock.sendall(_HELLO.pack(_MAGIC, self.rank, self.size))
                (ack,) = _recv_exact(sock, 1)
            except (OSError, ConnectionError) as e:
                note = str(e)
                time.sleep(0.05)
                continue
            if ack == _ACK_OK:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._socks[peer] = sock
                self._send_locks[peer] = threading.Lock()
                return
            sock.close()
            if ack == _ACK_COLLISION:
                raise RankCollisionError(f"rank {self.rank} is already connected to rank {peer}")
            note = "group size mismatch"
            time.sleep(0.05)

    def _accept_all(self, deadline: float) -> None:
        expected = set(range(self.rank + 1, self.size))
        note = ""
        while expected:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise CommunicatorTimeout(
                    f"rank {self.rank}: ranks {sorted(expected)} did not connect{' (' + note + ')' if note else ''}"
                )
            self._listener.settimeout(min(remaining, 0.5))
            try:
                sock, _ = self._listener.accept()
                sock.settimeout(remaining)
                magic, peer, size = _HELLO.unpack(_recv_exact(sock, _HELLO.size))
            except (socket.timeout, ConnectionError, OSError, struct.error):
                continue
            if magic != _MAGIC or size != self.size:
                note = f"a peer announced group size {size}, expected {self.size}"
                sock.sendall(bytes([_ACK_SIZE_MISMATCH]))
                sock.close()
                continue
            if peer not in expected:
                sock.sendall(bytes([_ACK_COLLISION]))
                sock.close()
                if peer in self._socks or peer == self.rank:
                    raise RankCollisionError(f"rank {peer} connected twice to rank {self.rank}")
                continue
            sock.sendall(bytes([_ACK_OK]))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._socks[peer] = sock
            self._send_locks[peer] = threading.Lock()
            expected.discard(peer)

    def _read_loop(self, peer: int, sock: socket.socket) -> None:
        stream = sock.makefile("rb")
        inbox = self._inbox[peer]
        try:
            while True:
                inbox.put(decode_frame(stream))
        except BaseException as e:
            if not self._closed:
                inbox.put(CommunicatorError(f"rank {self.rank}: lost connection to rank {peer}: {e}"))

    def _post(self, dest: int, message: Message) -> None:
        frame = encode_frame(message)
        with self._send_locks[dest]:
            try:
                self._socks[dest].sendall(frame)
            except OSError as e:
                raise CommunicatorError(f"rank {self.rank}: send to rank {dest} failed: {e}") from None

    def close(self) -> None:
        self._closed = True
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._socks = {}
        listener = getattr(self, "_listener", None)
        if listener is not None:
            listener.close()
            self._listener = None


def free_endpoints(n: int, host: str = "127.0.0.1") -> list[str]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
        return [f"{host}:{s.getsockname()[1]}" for s in socks]
    finally:
        for s in socks:
            s.close()


def _tcp_worker(rank, size, endpoints, timeout, fn, args, results):
    try:
        comm = TCPCommunicator(rank, size, endpoints, timeout)
        try:
            out = fn(comm, *args)
            comm.barrier()
        finally:
            comm.close()
        results.put((rank, True, out))
    except BaseException as e:
        results.put((rank, False, f"{type(e).__name__}: {e}\n{traceback.format_exc()}"))


def launch_tcp(size: int, fn, *args, timeout: float = DEFAULT_TIMEOUT, endpoints=None) -> list:
    """Run ``fn(comm, *args)`` in ``size`` spawned processes over localhost TCP.

    ``fn`` and its arguments must be picklable. Returns results by rank.
    """
    ctx = mp.get_context("spawn")
    endpoints = endpoints or free_endpoints(size)
    results = ctx.Queue()
    procs = [
        ctx.Process(target=_tcp_worker, args=(r, size, endpoints, timeout, fn, args, results), daemon=True)
        for r in range(size)
    ]
    for p in procs:
        p.start()
    out: list = [None] * size
    failures = []
    try:
        for _ in range(size):
            rank, ok, value = results.get(timeout=timeout * 4 + 60)
            if ok:
                out[rank] = value
            else:
                failures.append((rank, value))
    except queue.Empty:
        failures.append((-1, "workers did not report back"))
    finally:
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
    if failures:
        failures.sort(key=lambda f: ("Timeout" in f[1].split(":", 1)[0], f[0]))
        rank, msg = failures[0]
        raise CommunicatorError(f"worker rank {rank} failed: {msg}")
    return out
