"""Object-oriented model composition.

A :class:`Link` owns parameters; a :class:`Chain` also owns child links,
so a model is a tree of fragments whose parameters are found by walking
the tree. Registration only happens inside ``with self.init_scope():``.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
import weakref
import zlib
from typing import BinaryIO, Iterator

import numpy as np

from . import functions as F
from . import tensor as T
from .autograd import Variable

_rng_state = threading.local()


def get_rng() -> np.random.Generator:
    rng = getattr(_rng_state, "rng", None)
    if rng is None:
        rng = _rng_state.rng = np.random.default_rng()
    return rng


def seed(value: int) -> None:
    """Seed the calling thread's initializer generator."""
    _rng_state.rng = np.random.default_rng(value)


def path_rng(seed_value: int, path: str) -> np.random.Generator:
    return np.random.default_rng([seed_value, zlib.crc32(path.encode("utf-8"))])


class Initializer:
    def __call__(self, shape, dtype, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class HeNormal(Initializer):
    """Normal(0, scale * sqrt(2 / fan_in)), fan_in being the product of the trailing extents."""

    def __init__(self, scale: float = 1.0):
        self.scale = scale

    def __call__(self, shape, dtype, rng):
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
        std = self.scale * np.sqrt(2.0 / fan_in)
        return rng.normal(0.0, std, size=shape).astype(dtype)


class Constant(Initializer):
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, shape, dtype, rng):
        return np.full(shape, self.value, dtype=dtype)


def _as_initializer(init) -> Initializer:
    if isinstance(init, Initializer):
        return init
    if init is None:
        return HeNormal()
    return Constant(init)


class Parameter(Variable):
    """A leaf variable owned by a link, e.g. ``Parameter(HeNormal(), (n_out, n_in))``."""

    def __init__(self, initializer=None, shape=None, dtype=T.F64, name=None):
        if isinstance(initializer, T.Tensor):
            initializer = initializer.numpy()
        if isinstance(initializer, np.ndarray):
            data = T.Tensor(initializer, dtype)
            self.initializer = None
        else:
            if shape is None:
                raise ValueError("Parameter needs a shape unless given an array")
            if isinstance(shape, int):
                shape = (shape,)
            self.initializer = _as_initializer(initializer)
            data = T.Tensor._wrap(self.initializer(tuple(shape), np.dtype(dtype), get_rng()))
        super().__init__(data, requires_grad=True, name=name)

    def initialize(self, rng: np.random.Generator) -> None:
        if self.initializer is None:
            return
        self.data.assign(self.initializer(self.shape, self.dtype, rng))


class Link:
    """Model fragment holding named parameters."""

    _allow_children = False

    def __init__(self):
        self._ensure_registry()

    def _ensure_registry(self):
        d = self.__dict__
        if "_param_names" not in d:
            d["_param_names"] = []
            d["_child_names"] = []
            d["_in_scope"] = False
            d["_parent"] = None

    @contextlib.contextmanager
    def init_scope(self):
        self._ensure_registry()
        old = self._in_scope
        self.__dict__["_in_scope"] = True
        try:
            yield
        finally:
            self.__dict__["_in_scope"] = old

    def __setattr__(self, name, value):
        self._ensure_registry()
        if self._in_scope and isinstance(value, (Parameter, Link)):
            if name in self._param_names or name in self._child_names:
                raise ValueError(f"{type(self).__name__}: {name!r} is already registered")
            if isinstance(value, Parameter):
                self._param_names.append(name)
                value.name = name
            else:
                if not self._allow_children:
                    raise TypeError(f"{type(self).__name__} is a Link; register child links on a Chain")
                owner = value._parent() if value._parent is not None else None
                if owner is not None or value is self:
                    raise ValueError(f"link {name!r} already belongs to another chain; sharing is not supported")
                # weak, so a model tree holds no reference cycle and is freed
                # by reference counting alone
                value.__dict__["_parent"] = weakref.ref(self)
                self._child_names.append(name)
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator["Link"]:
        self._ensure_registry()
        for name in self._child_names:
            yield getattr(self, name)

    def namedparams(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """Depth-first ``(path, param)`` pairs, own parameters before children."""
        self._ensure_registry()
        for name in self._param_names:
            yield f"{prefix}/{name}", getattr(self, name)
        for name in self._child_names:
            yield from getattr(self, name).namedparams(f"{prefix}/{name}")

    def params(self) -> Iterator[Parameter]:
        for _, p in self.namedparams():
            yield p

    def namedlinks(self, prefix: str = "") -> Iterator[tuple[str, "Link"]]:
        self._ensure_registry()
        yield prefix or "/", self
        for name in self._child_names:
            yield from getattr(self, name).namedlinks(f"{prefix}/{name}")

    def cleargrads(self) -> None:
        for p in self.params():
            p.cleargrad()

    def init_params(self, seed_value: int) -> None:
        """Redraw every parameter from a generator derived from (seed, path)."""
        for path, p in self.namedparams():
            p.initialize(path_rng(seed_value, path))


class Chain(Link):
    """Link that can also hold child links."""

    _allow_children = True


def params(root: Link):
    return root.params()


def namedparams(root: Link):
    return root.namedparams()


def cleargrads(root: Link) -> None:
    root.cleargrads()


class Linear(Link):
    def __init__(self, n_in: int, n_out: int, nobias: bool = False, initialW=None, dtype=T.F64):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ValueError("n_in and n_out must be positive")
        with self.init_scope():
            self.W = Parameter(initialW if initialW is not None else HeNormal(), (n_out, n_in), dtype)
            if not nobias:
                self.b = Parameter(0, (n_out,), dtype)
        self.nobias = nobias

    def forward(self, x):
        if self.nobias:
            return F.linear(x, self.W)
        return F.linear(x, self.W, self.b)


class MLP(Chain):
    def __init__(self, n_in: int, n_hid: int, n_out: int, dtype=T.F64):
        super().__init__()
        with self.init_scope():
            self.l1 = Linear(n_in, n_hid, dtype=dtype)
            self.l2 = Linear(n_hid, n_out, dtype=dtype)

    def forward(self, x):
        h = F.relu(self.l1(x))
        return self.l2(h)


def save(root: Link, sink: BinaryIO) -> None:
    T.write_snapshot(sink, ((path, p.data) for path, p in root.namedparams()))


def load(root: Link, source: BinaryIO) -> None:
    records = dict(T.read_snapshot(source))
    expected = dict(root.namedparams())
    missing = [p for p in expected if p not in records]
    if missing:
        raise KeyError(f"snapshot has no entry for {missing[0]!r}")
    unexpected = [p for p in records if p not in expected]
    if unexpected:
        raise KeyError(f"snapshot entry {unexpected[0]!r} does not match any parameter")
    for path, p in expected.items():
        arr = records[path]
        if arr.shape != p.shape:
            raise T.ShapeError(f"{path}: snapshot shape {arr.shape} != parameter shape {p.shape}")
        if arr.dtype != p.dtype:
            raise TypeError(f"{path}: snapshot dtype {arr.dtype} != parameter dtype {p.dtype}")
    for path, p in expected.items():
        p.data.assign(records[path])


def checksum(root: Link) -> str:
    """SHA-256 over every parameter's path and raw bytes."""
    h = hashlib.sha256()
    for path, p in root.namedparams():
        h.update(path.encode())
        h.update(p.array.tobytes())
    return h.hexdigest()
