"""Synchronous data parallelism: gradient averaging, dataset scattering, replica sync."""

from __future__ import annotations

import numpy as np

from ..autograd import Variable
from ..links import Link
from ..optim import MissingGradError, Optimizer
from ..tensor import Tensor
from ..training import Dataset
from .communicator import DEFAULT_TIMEOUT, Communicator, ShapeMismatchError, SingleCommunicator


class StructuralDivergenceError(RuntimeError):
    """Ranks hold differently shaped models in the same iteration."""


def create_communicator(transport: str = "single", rank: int = 0, size: int = 1, endpoints=None,
                        timeout: float = DEFAULT_TIMEOUT) -> Communicator:
    if transport == "single" or (size == 1 and transport != "tcp"):
        return SingleCommunicator(timeout)
    if transport == "inprocess":
        from .inprocess import InProcessCommunicator

        return InProcessCommunicator(rank, size, endpoints or "default", timeout)
    if transport == "tcp":
        from .tcp import TCPCommunicator

        return TCPCommunicator(rank, size, endpoints, timeout)
    raise ValueError(f"unknown transport {transport!r}")


class MultiNodeOptimizer:
    """Wraps an optimizer; averages gradients across ranks before each update."""

    def __init__(self, actual_optimizer: Optimizer, communicator: Communicator):
        self.actual_optimizer = actual_optimizer
        self.communicator = communicator

    def setup(self, model: Link) -> "MultiNodeOptimizer":
        self.actual_optimizer.setup(model)
        return self

    @property
    def target(self):
        return self.actual_optimizer.target

    def allreduce_grad(self) -> None:
        comm = self.communicator
        for path, p in self.target.namedparams():
            if p.grad is None:
                raise MissingGradError(f"parameter {path} has no gradient")
            try:
                total = comm.allreduce_sum(p.grad.data)
            except ShapeMismatchError as e:
                raise StructuralDivergenceError(f"parameter {path} differs across ranks: {e}") from None
            avg = np.divide(total.numpy(), comm.size, dtype=total.dtype)
            p.grad = Variable(Tensor._wrap(avg), requires_grad=False)

    def update(self) -> None:
        self.allreduce_grad()
        self.actual_optimizer.update()

    def __getattr__(self, name):
        if name == "actual_optimizer":
            raise AttributeError(name)
        return getattr(self.actual_optimizer, name)


def create_multi_node_optimizer(actual_optimizer: Optimizer, communicator: Communicator) -> MultiNodeOptimizer:
    return MultiNodeOptimizer(actual_optimizer, communicator)


def shard_sizes(n_items: int, n_shards: int) -> list[int]:
    base, extra = divmod(n_items, n_shards)
    return [base + (1 if r < extra else 0) for r in range(n_shards)]


def scatter_dataset(dataset: Dataset | None, comm: Communicator, shuffle: bool = False, seed: int = 0,
                    root: int = 0, force_equal_length: bool = False) -> Dataset:
    """Split root's dataset into contiguous fragments, one per rank.

    Fragment sizes are ``N // n`` with the first ``N % n`` one larger. With
    ``force_equal_length`` shorter fragments are padded by wrapping around
    the (permuted) order so every rank runs the same number of iterations.
    """
    n = comm.size
    if comm.rank == root:
        order = np.random.default_rng(seed).permutation(len(dataset)) if shuffle else np.arange(len(dataset))
        sizes = shard_sizes(len(dataset), n)
        bounds = np.cumsum([0] + sizes)
        pieces = [order[bounds[r]:bounds[r + 1]] for r in range(n)]
        if force_equal_length and len(set(sizes)) > 1:
            longest = max(sizes)
            pieces = [np.concatenate([p, order[: longest - len(p)]]) for p in pieces]
        xs = [dataset.x[p] for p in pieces]
        ys = [dataset.y[p] for p in pieces]
    else:
        xs = ys = None
    x = comm.scatter(xs, root)
    y = comm.scatter(ys, root)
    return Dataset(x, y)


def broadcast_params(model: Link, comm: Communicator, root: int = 0) -> None:
    """Overwrite every rank's parameters with root's."""
    if comm.size == 1:
        return
    for path, p in model.namedparams():
        try:
            values = comm.broadcast(p.data, root)
        except ShapeMismatchError as e:
            raise StructuralDivergenceError(f"parameter {path} differs across ranks: {e}") from None
        p.data.assign(values)
