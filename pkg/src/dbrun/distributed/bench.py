"""Desk-scale all-reduce timing table: communication against full-iteration time.

Every rank runs ``iters`` iterations of a small MLP forward/backward step
followed by one all-reduce of a payload of the requested byte size. Rank 0
reports mean communication time, mean compute time and mean full-iteration
time; the last comes from the loop's own wall clock, not from adding the
other two.
"""

from __future__ import annotations

import csv
import re
import time

import numpy as np

from .. import functions as F
from ..autograd import Variable
from ..links import MLP
from .communicator import DEFAULT_TIMEOUT, Communicator

CSV_COLUMNS = ("n", "bytes", "comm_ms_mean", "iter_ms_mean", "compute_ms_mean")

_UNITS = {"": 1, "b": 1, "k": 1024, "m": 1024**2, "g": 1024**3}


def parse_size(text: str) -> int:
    """``"1k"`` -> 1024, ``"2m"`` -> 2097152, ``"512"`` -> 512."""
    m = re.fullmatch(r"\s*(\d+)\s*([kmgb]?)\s*", text.lower())
    if m is None:
        raise ValueError(f"bad size {text!r}; expected e.g. 512, 1k or 1m")
    return int(m.group(1)) * _UNITS[m.group(2)]


def parse_sizes(text: str) -> list[int]:
    return [parse_size(s) for s in text.split(",") if s.strip()]


def _bench_rank(comm: Communicator, sizes, iters: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed + comm.rank)
    model = MLP(16, 32, 2)
    model.init_params(seed)
    x = rng.normal(size=(32, 16))
    t = rng.integers(0, 2, size=32)
    rows = []
    for nbytes in sizes:
        payload = rng.normal(size=max(nbytes // 8, 1))
        comm.barrier()
        comm_s = compute_s = 0.0
        loop_start = time.perf_counter()
        for _ in range(iters):
            t0 = time.perf_counter()
            model.cleargrads()
            loss = F.softmax_cross_entropy(model(Variable(x, requires_grad=False)), t)
            loss.backward()
            t1 = time.perf_counter()
            comm.allreduce_sum(payload)
            t2 = time.perf_counter()
            compute_s += t1 - t0
            comm_s += t2 - t1
        # wall time of the whole loop, timed independently of the two parts
        iter_s = time.perf_counter() - loop_start
        rows.append(
            {
                "n": comm.size,
                "bytes": nbytes,
                "comm_ms_mean": comm_s * 1e3 / iters,
                "iter_ms_mean": iter_s * 1e3 / iters,
                "compute_ms_mean": compute_s * 1e3 / iters,
            }
        )
    return rows


def bench_allreduce(workers, sizes, iters: int = 100, transport: str = "inprocess", seed: int = 0,
                    timeout: float = DEFAULT_TIMEOUT) -> list[dict]:
    """One row per (n, size), n ranging over ``workers`` (an int or a list of ints)."""
    if isinstance(workers, int):
        workers = [workers]
    if isinstance(sizes, str):
        sizes = parse_sizes(sizes)
    rows = []
    for n in workers:
        if transport == "tcp":
            from .tcp import launch_tcp

            per_rank = launch_tcp(n, _bench_rank, list(sizes), iters, seed, timeout=timeout)
        else:
            from .inprocess import run_inprocess

            per_rank = run_inprocess(n, _bench_rank, list(sizes), iters, seed, timeout=timeout)
        rows.extend(per_rank[0])
    return rows


def write_csv(rows, stream) -> None:
    writer = csv.DictWriter(stream, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
