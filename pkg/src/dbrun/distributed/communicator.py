"""Communicator abstraction and the ring all-reduce.

Every message carries the sender's collective sequence number and a
collective tag; receivers check both, so ranks that call collectives in
different orders fail loudly instead of mixing payloads.
"""

from __future__ import annotations

import math
import queue
from dataclasses import dataclass

import numpy as np

from ..tensor import Tensor

DEFAULT_TIMEOUT = 30.0

TAG_BARRIER = 1
TAG_ALLREDUCE = 2
TAG_BROADCAST = 3
TAG_SCATTER = 4
TAG_SEND = 5


class CommunicatorError(RuntimeError):
    pass


class CommunicatorTimeout(CommunicatorError, TimeoutError):
    pass


class RankCollisionError(CommunicatorError):
    pass


class CollectiveMismatchError(CommunicatorError):
    """Peers disagree about which collective is being executed."""


class ShapeMismatchError(CommunicatorError):
    pass


@dataclass
class Message:
    seq: int
    tag: int
    desc: str
    payload: np.ndarray


def describe(arr) -> str:
    """Shape/dtype descriptor carried in message headers, e.g. ``"float64:3x4"``."""
    arr = arr.numpy() if isinstance(arr, Tensor) else np.asarray(arr)
    return f"{arr.dtype.name}:{'x'.join(map(str, arr.shape))}"


def ring_chunks(length: int, size: int) -> list[tuple[int, int]]:
    """Chunk bounds: ceil(length / size) elements each, the tail chunk partial or empty."""
    step = math.ceil(length / size) if length else 0
    return [(min(c * step, length), min((c + 1) * step, length)) for c in range(size)]


class Communicator:
    """Rank/size view of a worker group with blocking collectives.

    Transports implement ``_post(dest, message)`` and provide one inbox
    queue per peer in ``self._inbox``.
    """

    transport = "abstract"

    def __init__(self, rank: int, size: int, timeout: float = DEFAULT_TIMEOUT):
        if not 0 <= rank < size:
            raise ValueError(f"rank {rank} outside [0, {size})")
        self.rank = rank
        self.size = size
        self.timeout = timeout
        self._seq = 0
        self._inbox: dict[int, queue.Queue] = {}

    # transport hooks

    def _post(self, dest: int, message: Message) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # point to point

    def _send(self, dest: int, tag: int, payload, desc: str | None = None) -> None:
        payload = np.array(payload, order="C", copy=True)
        self._post(dest, Message(self._seq, tag, desc if desc is not None else describe(payload), payload))

    def _recv(self, src: int, tag: int, desc: str | None = None) -> np.ndarray:
        try:
            msg = self._inbox[src].get(timeout=self.timeout)
        except queue.Empty:
            raise CommunicatorTimeout(
                f"rank {self.rank}: no message from rank {src} within {self.timeout}s (collective #{self._seq})"
            ) from None
        if isinstance(msg, BaseException):
            raise msg
        if msg.seq != self._seq or msg.tag != tag:
            raise CollectiveMismatchError(
                f"rank {self.rank}: expected collective #{self._seq} tag {tag} from rank {src}, "
                f"got #{msg.seq} tag {msg.tag}"
            )
        if desc is not None and msg.desc != desc:
            raise ShapeMismatchError(f"rank {self.rank}: local tensor is {desc} but rank {src} sent {msg.desc}")
        return msg.payload

    def send_array(self, dest: int, array) -> None:
        self._send(dest, TAG_SEND, np.asarray(array))
        self._seq += 1

    def recv_array(self, src: int) -> np.ndarray:
        out = self._recv(src, TAG_SEND)
        self._seq += 1
        return out

    # collectives

    def barrier(self) -> None:
        if self.size > 1:
            token = np.zeros(0)
            if self.rank == 0:
                for r in range(1, self.size):
                    self._recv(r, TAG_BARRIER)
                for r in range(1, self.size):
                    self._send(r, TAG_BARRIER, token)
            else:
                self._send(0, TAG_BARRIER, token)
                self._recv(0, TAG_BARRIER)
        self._seq += 1

    def allreduce_sum(self, t) -> Tensor:
        """Ring all-reduce: reduce-scatter then all-gather, 2(n-1) steps.

        Chunk ``c`` is accumulated starting at rank ``c`` and moving up the
        ring, and the finished chunk is copied verbatim to everyone, so all
        ranks end up with bitwise identical results.
        """
        arr = t.numpy() if isinstance(t, Tensor) else np.asarray(t)
        desc = describe(arr)
        buf = np.array(arr, copy=True).reshape(-1)
        n, r = self.size, self.rank
        if n > 1:
            bounds = ring_chunks(buf.size, n)
            nxt, prv = (r + 1) % n, (r - 1) % n
            for step in range(n - 1):
                lo, hi = bounds[(r - step) % n]
                self._send(nxt, TAG_ALLREDUCE, buf[lo:hi], desc)
                lo, hi = bounds[(r - step - 1) % n]
                incoming = self._recv(prv, TAG_ALLREDUCE, desc)
                buf[lo:hi] = incoming + buf[lo:hi]
            for step in range(n - 1):
                lo, hi = bounds[(r + 1 - step) % n]
                self._send(nxt, TAG_ALLREDUCE, buf[lo:hi], desc)
                lo, hi = bounds[(r - step) % n]
                buf[lo:hi] = self._recv(prv, TAG_ALLREDUCE, desc)
        self._seq += 1
        return Tensor._wrap(buf.reshape(arr.shape))

    def broadcast(self, t, root: int = 0, check_shape: bool = True) -> np.ndarray:
        """Root's array on every rank; others must pass a same-shaped array unless ``check_shape`` is off."""
        out = self._broadcast(t, root, check_shape)
        self._seq += 1
        return out

    def _broadcast(self, t, root, check_shape):
        arr = None if t is None else (t.numpy() if isinstance(t, Tensor) else np.asarray(t))
        if self.size == 1:
            return np.array(arr, copy=True)
        if self.rank == root:
            for dest in range(self.size):
                if dest != root:
                    self._send(dest, TAG_BROADCAST, arr)
            return np.array(arr, copy=True)
        desc = describe(arr) if check_shape and arr is not None else None
        return np.array(self._recv(root, TAG_BROADCAST, desc), copy=True)

    def scatter(self, pieces, root: int = 0) -> np.ndarray:
        """Rank ``r`` receives ``pieces[r]`` from root."""
        if self.rank == root:
            if len(pieces) != self.size:
                raise ValueError(f"scatter needs {self.size} pieces, got {len(pieces)}")
            for dest in range(self.size):
                if dest != root:
                    self._send(dest, TAG_SCATTER, np.asarray(pieces[dest]))
            out = np.array(pieces[root], copy=True)
        else:
            out = np.array(self._recv(root, TAG_SCATTER), copy=True)
        self._seq += 1
        return out

    def __repr__(self):
        return f"<{type(self).__name__} rank={self.rank} size={self.size}>"


class SingleCommunicator(Communicator):
    """Size-1 group; every collective is the identity."""

    transport = "single"

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(0, 1, timeout)
