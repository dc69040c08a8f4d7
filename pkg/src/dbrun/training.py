"""Datasets, minibatch iteration and the forward/backward/update loop."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import functions as F
from .autograd import Variable
from .links import Link
from .optim import Optimizer


class Dataset:
    """Ordered ``(input, label)`` examples backed by two arrays."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        x = np.asarray(x)
        y = np.asarray(y, dtype=np.int64)
        if len(x) != len(y):
            raise ValueError(f"{len(x)} inputs but {len(y)} labels")
        self.x = x
        self.y = y

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i):
        return self.x[i], int(self.y[i])

    def take(self, indices) -> tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.int64)
        return self.x[indices], self.y[indices]

    def subset(self, indices) -> "Dataset":
        return Dataset(*self.take(indices))

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0


class SerialIterator:
    """Minibatches over a dataset, reshuffled every epoch when ``shuffle`` is set.

    The last batch of an epoch may be short; it is emitted as is.
    """

    def __init__(self, dataset: Dataset, batch_size: int, shuffle: bool = True, seed: int = 0, repeat: bool = True):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.repeat = repeat
        self._rng = np.random.default_rng(seed)
        self.epoch = 0
        self.is_new_epoch = False
        self.current_position = 0
        self.last_indices: np.ndarray | None = None
        self._order = self._new_order()

    def _new_order(self) -> np.ndarray:
        n = len(self.dataset)
        return self._rng.permutation(n) if self.shuffle else np.arange(n)

    def __iter__(self):
        return self

    def __next__(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.repeat and self.epoch > 0:
            raise StopIteration
        n = len(self.dataset)
        start = self.current_position
        stop = min(start + self.batch_size, n)
        idx = self._order[start:stop]
        if stop >= n:
            self.epoch += 1
            self.is_new_epoch = True
            self.current_position = 0
            self._order = self._new_order()
        else:
            self.is_new_epoch = False
            self.current_position = stop
        self.last_indices = idx
        return self.dataset.take(idx)

    next = __next__

    @property
    def epoch_detail(self) -> float:
        return self.epoch + self.current_position / len(self.dataset)


def classification_loss(model: Link, x: np.ndarray, t: np.ndarray) -> Variable:
    return F.softmax_cross_entropy(model(Variable(x, requires_grad=False)), t)


class StandardUpdater:
    def __init__(
        self,
        iterator: SerialIterator,
        optimizer: Optimizer,
        model: Link | None = None,
        loss_fn: Callable[[Link, np.ndarray, np.ndarray], Variable] = classification_loss,
    ):
        self.iterator = iterator
        self.optimizer = optimizer
        self.model = model if model is not None else optimizer.target
        self.loss_fn = loss_fn
        self.iteration = 0

    @property
    def epoch(self) -> int:
        return self.iterator.epoch

    @property
    def is_new_epoch(self) -> bool:
        return self.iterator.is_new_epoch

    def update_one(self) -> float:
        x, t = next(self.iterator)
        self.model.cleargrads()
        loss = self.loss_fn(self.model, x, t)
        loss.backward()
        self.optimizer.update()
        self.iteration += 1
        return loss.item()


def evaluate(model: Link, dataset: Dataset, batch_size: int = 256) -> dict:
    """Mean loss and argmax accuracy over ``dataset``; parameters untouched."""
    total_loss = 0.0
    correct = 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        x, t = dataset.take(np.arange(start, min(start + batch_size, n)))
        logits = model(Variable(x, requires_grad=False))
        loss = F.softmax_cross_entropy(logits, t)
        total_loss += loss.item() * len(t)
        correct += int((logits.array.argmax(axis=1) == t).sum())
        del logits, loss
    return {"mean_loss": total_loss / max(n, 1), "accuracy": correct / max(n, 1)}


class Evaluator:
    """Epoch-end extension computing validation metrics."""

    def __init__(self, dataset: Dataset, model: Link, batch_size: int = 256):
        self.dataset = dataset
        self.model = model
        self.batch_size = batch_size

    def __call__(self, trainer: "Trainer") -> dict:
        result = evaluate(self.model, self.dataset, self.batch_size)
        return {"val_loss": result["mean_loss"], "val_accuracy": result["accuracy"]}


class LogReport:
    """Writes each epoch record as one JSON line."""

    def __init__(self, stream: TextIO):
        self.stream = stream

    def __call__(self, trainer: "Trainer") -> dict:
        self.stream.write(json.dumps(trainer.current_record) + "\n")
        self.stream.flush()
        return {}


@dataclass
class Trainer:
    updater: StandardUpdater
    stop_trigger: tuple = (1, "epoch")
    extensions: list = field(default_factory=list)
    report: list = field(default_factory=list)

    def __post_init__(self):
        n, unit = self.stop_trigger
        if unit != "epoch":
            raise ValueError("only epoch stop triggers are supported")
        self.max_epoch = int(n)
        self.current_record: dict = {}

    def extend(self, extension) -> None:
        self.extensions.append(extension)

    def run(self) -> list[dict]:
        losses: list[float] = []
        started = time.perf_counter()
        while self.updater.epoch < self.max_epoch:
            losses.append(self.updater.update_one())
            if self.updater.is_new_epoch:
                record = {"epoch": self.updater.epoch, "mean_loss": float(np.mean(losses))}
                self.current_record = record
                for ext in self.extensions:
                    if isinstance(ext, LogReport):
                        continue
                    record.update(ext(self) or {})
                record["wall_ms"] = (time.perf_counter() - started) * 1e3
                for ext in self.extensions:
                    if isinstance(ext, LogReport):
                        ext(self)
                self.report.append(record)
                losses = []
                started = time.perf_counter()
        return self.report


def make_two_gaussians(n: int, dim: int = 2, separation: float = 5.0, seed: int = 0, dtype=np.float64) -> Dataset:
    """Two unit-variance Gaussian blobs whose centres are ``separation`` apart."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    y = rng.integers(0, 2, size=n)
    centres = np.outer(2 * y - 1, direction) * (separation / 2)
    x = centres + rng.normal(size=(n, dim))
    return Dataset(x.astype(dtype), y)


def synthetic_split(n_train: int = 800, n_val: int = 200, dim: int = 2, seed: int = 0, dtype=np.float64):
    full = make_two_gaussians(n_train + n_val, dim=dim, seed=seed, dtype=dtype)
    return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_val))


# IDX files: big-endian magic (two zero bytes, type code, rank), u32 extents, raw data.
_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    code, rank = data[2], data[3]
    if code not in _IDX_TYPES:
        raise ValueError(f"{path}: unknown IDX type code {code:#x}")
    shape = struct.unpack(f">{rank}I", data[4 : 4 + 4 * rank])
    dt = np.dtype(_IDX_TYPES[code])
    count = int(np.prod(shape, dtype=np.int64))
    body = data[4 + 4 * rank :]
    if len(body) != count * dt.itemsize:
        raise ValueError(f"{path}: expected {count * dt.itemsize} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}.get(array.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"no IDX type for {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(_IDX_TYPES[code]).tobytes())


def load_idx_dataset(images_path, labels_path) -> Dataset:
    """Images flattened per example and scaled to [0, 1] as float32."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    x = images.reshape(len(images), -1).astype(np.float32) / np.float32(255.0)
    return Dataset(x, labels.astype(np.int64))

