"""Transport between execution contexts (threads) of one process."""

from __future__ import annotations

import queue
import threading
import uuid

import numpy as np

from .communicator import (
    DEFAULT_TIMEOUT,
    Communicator,
    CommunicatorTimeout,
    Message,
    RankCollisionError,
)

_groups: dict[tuple[str, int], "_Group"] = {}
_groups_lock = threading.Lock()


class _Group:
    def __init__(self, size: int):
        self.size = size
        self.queues = {(s, d): queue.Queue() for s in range(size) for d in range(size) if s != d}
        self.joined: set[int] = set()
        self.cond = threading.Condition()


class InProcessCommunicator(Communicator):
    transport = "inprocess"

    def __init__(self, rank: int, size: int, group: str = "default", timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, size, timeout)
        key = (group, size)
        with _groups_lock:
            g = _groups.get(key)
            if g is None:
                g = _groups[key] = _Group(size)
            with g.cond:
                if rank in g.joined:
                    raise RankCollisionError(f"rank {rank} already joined in-process group {group!r}")
                g.joined.add(rank)
                if len(g.joined) == size:
                    del _groups[key]
                g.cond.notify_all()
        self._group = g
        self._inbox = {s: g.queues[(s, rank)] for s in range(size) if s != rank}
        with g.cond:
            if not g.cond.wait_for(lambda: len(g.joined) == size, timeout=timeout):
                g.joined.discard(rank)
                raise CommunicatorTimeout(
                    f"in-process group {group!r}: only {len(g.joined)} of {size} ranks joined within {timeout}s"
                )

    def _post(self, dest, message: Message):
        message.payload = np.array(message.payload, copy=True)
        self._group.queues[(self.rank, dest)].put(message)


def new_group_name() -> str:
    return uuid.uuid4().hex


def run_inprocess(size: int, fn, *args, timeout: float = DEFAULT_TIMEOUT, **kwargs) -> list:
    """Run ``fn(comm, *args, **kwargs)`` on ``size`` threads, one per rank; return results by rank."""
    group = new_group_name()
    results: list = [None] * size
    errors: list = [None] * size

    def worker(rank):
        try:
            comm = InProcessCommunicator(rank, size, group, timeout)
            results[rank] = fn(comm, *args, **kwargs)
        except BaseException as e:  # re-raised in the caller
            errors[rank] = e

    threads = [threading.Thread(target=worker, args=(r,), name=f"rank{r}", daemon=True) for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for e in errors:
        if e is not None and not isinstance(e, CommunicatorTimeout):
            raise e
    for e in errors:
        if e is not None:
            raise e
    return results
