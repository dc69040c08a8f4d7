"""Dense float tensors on CPU with an instrumented buffer registry.

Every :class:`Tensor` owns one contiguous row-major buffer. Construction
registers the buffer with the process-global :data:`registry` and the
buffer is unregistered when the tensor object is reclaimed, so tests can
observe exactly when graph memory is released.
"""

from __future__ import annotations

import io
import itertools
import struct
import threading
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
DTYPES = (F32, F64)

_DTYPE_TAGS = {F32: 0, F64: 1}
_TAG_DTYPES = {0: F32, 1: F64}

_MAX_ELEMENTS = 2**40


class ShapeError(ValueError):
    pass


class BufferRegistry:
    """Counts live tensor buffers.

    Buffers can carry string tags (``"retained"``, ``"grad"``...) so that
    tests can follow one category of memory separately from the rest.
    """

    def __init__(self):
        # reentrant: a collection triggered inside a locked section can run
        # Tensor.__del__, which releases a buffer on the same thread
        self._lock = threading.RLock()
        self._ids = itertools.count(1)
        self._live: dict[int, set[str]] = {}
        self._peak = 0
        self._tag_live: dict[str, int] = {}
        self._tag_peak: dict[str, int] = {}

    def _register(self) -> int:
        with self._lock:
            buffer_id = next(self._ids)
            self._live[buffer_id] = set()
            self._peak = max(self._peak, len(self._live))
            return buffer_id

    def _release(self, buffer_id: int) -> None:
        with self._lock:
            tags = self._live.pop(buffer_id, None)
            if tags:
                for tag in tags:
                    self._tag_live[tag] -= 1

    def tag(self, tensor: "Tensor", tag: str) -> None:
        with self._lock:
            tags = self._live.get(tensor.buffer_id)
            if tags is None or tag in tags:
                return
            tags.add(tag)
            n = self._tag_live.get(tag, 0) + 1
            self._tag_live[tag] = n
            self._tag_peak[tag] = max(self._tag_peak.get(tag, 0), n)

    @property
    def live_count(self) -> int:
        return len(self._live)

    @property
    def peak_count(self) -> int:
        return self._peak

    def is_live(self, buffer_id: int) -> bool:
        return buffer_id in self._live

    def tagged_live(self, tag: str) -> int:
        return self._tag_live.get(tag, 0)

    def tagged_peak(self, tag: str) -> int:
        return self._tag_peak.get(tag, 0)

    def reset_peak(self) -> None:
        with self._lock:
            self._peak = len(self._live)
            self._tag_peak = dict(self._tag_live)


registry = BufferRegistry()


def _check_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in DTYPES:
        raise TypeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """Immutable n-dimensional float array.

    The wrapped ndarray is made read-only; the only sanctioned mutation is
    :meth:`assign`, used by optimizers for in-place parameter updates.
    """

    __slots__ = ("_array", "buffer_id", "__weakref__")

    def __init__(self, data, dtype=None):
        if dtype is None:
            dtype = getattr(data, "dtype", F64)
            if np.dtype(dtype).kind != "f":
                dtype = F64
        dtype = _check_dtype(dtype)
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        arr.flags.writeable = False
        self._array = arr
        self.buffer_id = registry._register()

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of a freshly computed array (no copy)
        arr = np.asarray(arr)
        if arr.dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if not arr.flags.c_contiguous or not arr.flags.owndata:
            arr = np.array(arr, order="C", copy=True)
        arr.flags.writeable = False
        t = cls.__new__(cls)
        t._array = arr
        t.buffer_id = registry._register()
        return t

    def __del__(self, _release=registry._release):
        try:
            _release(self.buffer_id)
        except AttributeError:
            pass

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def dtype(self) -> np.dtype:
        return self._array.dtype

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    def numpy(self) -> np.ndarray:
        """Return a read-only view of the buffer."""
        return self._array

    def item(self) -> float:
        return float(self._array.item())

    def assign(self, values) -> None:
        """Overwrite the buffer in place (optimizer updates only)."""
        values = np.asarray(values)
        if values.shape != self.shape:
            raise ShapeError(f"assign shape {values.shape} != {self.shape}")
        self._array.flags.writeable = True
        try:
            self._array[...] = values
        finally:
            self._array.flags.writeable = False

    def __repr__(self):
        return f"Tensor({self._array.tolist()!r}, dtype={self.dtype.name})"

    def __len__(self):
        return len(self._array)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor) and (dtype is None or x.dtype == np.dtype(dtype)):
        return x
    if isinstance(x, Tensor):
        return Tensor._wrap(x.numpy().astype(dtype))
    return Tensor(x, dtype)


def alloc(shape: Sequence[int], dtype=F64, fill: float = 0.0) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if any(d < 0 for d in shape):
        raise ShapeError(f"negative extent in {shape}")
    n = 1
    for d in shape:
        n *= d
        if n > _MAX_ELEMENTS:
            raise OverflowError(f"element count of {shape} overflows")
    return Tensor._wrap(np.full(shape, fill, dtype=_check_dtype(dtype)))


def zeros(shape, dtype=F64) -> Tensor:
    return alloc(shape, dtype, 0.0)


def ones(shape, dtype=F64) -> Tensor:
    return alloc(shape, dtype, 1.0)


def zeros_like(t: Tensor) -> Tensor:
    return alloc(t.shape, t.dtype, 0.0)


def ones_like(t: Tensor) -> Tensor:
    return alloc(t.shape, t.dtype, 1.0)


def scalar(value: float, dtype=F64) -> Tensor:
    return alloc((), dtype, value)


def broadcast_shape(*shapes: Sequence[int]) -> tuple[int, ...]:
    ndim = max((len(s) for s in shapes), default=0)
    out = []
    for axis in range(ndim):
        extent = 1
        for s in shapes:
            i = axis - (ndim - len(s))
            if i < 0:
                continue
            d = s[i]
            if d == 1:
                continue
            if extent not in (1, d):
                raise ShapeError(f"shapes {list(shapes)} are not broadcast-compatible")
            extent = d
        out.append(extent)
    return tuple(out)


def result_dtype(*tensors: Tensor) -> np.dtype:
    return F64 if any(t.dtype == F64 for t in tensors) else F32


_EWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
    "min": np.minimum,
}

_UNARY = {
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "abs": np.abs,
    "sqrt": np.sqrt,
    "square": np.square,
}


def ewise(op: str, a: Tensor, b: Tensor) -> Tensor:
    fn = _EWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    broadcast_shape(a.shape, b.shape)
    dt = result_dtype(a, b)
    with np.errstate(all="ignore"):
        out = fn(a.numpy(), b.numpy(), dtype=dt)
    return Tensor._wrap(out)


def unary(op: str, a: Tensor) -> Tensor:
    fn = _UNARY.get(op)
    if fn is None:
        raise ValueError(f"unknown unary op {op!r}")
    with np.errstate(all="ignore"):
        return Tensor._wrap(fn(a.numpy()))


def add(a, b):
    return ewise("add", a, b)


def sub(a, b):
    return ewise("sub", a, b)


def mul(a, b):
    return ewise("mul", a, b)


def div(a, b):
    return ewise("div", a, b)


def positive_mask(a: Tensor) -> Tensor:
    """1 where ``a > 0`` else 0, in ``a``'s dtype."""
    return Tensor._wrap((a.numpy() > 0).astype(a.dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    dt = result_dtype(a, b)
    return Tensor._wrap(np.matmul(a.numpy().astype(dt, copy=False), b.numpy().astype(dt, copy=False)))


def normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        ax = ax % ndim
        if ax in out:
            raise ShapeError(f"duplicate axis {ax}")
        out.append(ax)
    return tuple(sorted(out))


def reduce(op: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if op not in ("sum", "max"):
        raise ValueError(f"unknown reduction {op!r}")
    if a.ndim == 0 and axes in (None, (), []):
        return Tensor._wrap(a.numpy().copy())
    axes = normalize_axes(axes, a.ndim)
    fn = np.sum if op == "sum" else np.max
    return Tensor._wrap(np.asarray(fn(a.numpy(), axis=axes, keepdims=keepdims)))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is not None:
        axes = tuple(int(ax) for ax in axes)
        if len(axes) != a.ndim or sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
            raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    return Tensor._wrap(np.array(np.transpose(a.numpy(), axes), order="C", copy=True))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        return Tensor._wrap(a.numpy().reshape(tuple(shape)).copy())
    except ValueError as e:
        raise ShapeError(str(e)) from None


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if broadcast_shape(a.shape, shape) != shape:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    return Tensor._wrap(np.broadcast_to(a.numpy(), shape).copy())


def sum_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Sum over the axes that broadcasting ``shape`` up to ``a.shape`` stretches."""
    shape = tuple(shape)
    if broadcast_shape(shape, a.shape) != a.shape:
        raise ShapeError(f"cannot sum {a.shape} down to {shape}")
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and a.shape[lead + i] != 1
    )
    arr = a.numpy()
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    if lead:
        arr = arr.reshape(shape)
    return Tensor._wrap(np.array(arr, copy=True))


# Snapshot format: little-endian records of
# u32 path length, utf-8 path, u8 dtype tag, u32 rank, u64 extents, raw values.


def write_snapshot(sink: BinaryIO, records: Iterable[tuple[str, Tensor]], extra_tags=None) -> None:
    tags = dict(_DTYPE_TAGS)
    if extra_tags:
        tags.update(extra_tags)
    for path, t in records:
        arr = t.numpy() if isinstance(t, Tensor) else np.asarray(t)
        name = path.encode("utf-8")
        tag = tags.get(arr.dtype)
        if tag is None:
            raise TypeError(f"cannot serialize dtype {arr.dtype}")
        sink.write(struct.pack("<I", len(name)))
        sink.write(name)
        sink.write(struct.pack("<BI", tag, arr.ndim))
        sink.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        sink.write(np.asarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes(order="C"))


def _read_exact(source: BinaryIO, n: int) -> bytes:
    buf = source.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated snapshot: wanted {n} bytes, got {len(buf)}")
    return buf


def read_snapshot(source: BinaryIO, extra_tags=None) -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(path, array)`` records until end of stream."""
    tags = dict(_TAG_DTYPES)
    if extra_tags:
        tags.update(extra_tags)
    while True:
        head = source.read(4)
        if not head:
            return
        if len(head) != 4:
            raise EOFError("truncated snapshot header")
        (n,) = struct.unpack("<I", head)
        path = _read_exact(source, n).decode("utf-8")
        tag, rank = struct.unpack("<BI", _read_exact(source, 5))
        dtype = tags.get(tag)
        if dtype is None:
            raise ValueError(f"unknown dtype tag {tag} for {path!r}")
        shape = struct.unpack(f"<{rank}Q", _read_exact(source, 8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        raw = _read_exact(source, count * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        yield path, arr


def dumps_snapshot(records) -> bytes:
    buf = io.BytesIO()
    write_snapshot(buf, records)
    return buf.getvalue()


def loads_snapshot(data: bytes) -> list[tuple[str, np.ndarray]]:
    return list(read_snapshot(io.BytesIO(data)))
