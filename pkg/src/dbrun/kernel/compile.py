"""User-defined elementwise and reduction kernels evaluated on CPU.

Kernels are interpreted over the parsed body with full broadcasting
across inputs. Compiled kernels and their dtype specializations are held
in process-global caches.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .parser import (
    CONCRETE_TYPES,
    Assign,
    BinOp,
    Call,
    KernelCompileError,
    Name,
    Neg,
    Num,
    ParamDecl,
    names,
    parse_expr,
    parse_signature,
)

_BINARY = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide}
_CALLS = {
    "abs": np.abs,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "min": np.minimum,
    "max": np.maximum,
}
FOLDS = {"+": ("sum", 0.0), "max": ("max", -np.inf)}


class BindingError(TypeError):
    """Arguments bound to one generic type letter have different dtypes."""


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0


class _Cache:
    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict = {}
        self.stats = CacheStats()

    def get_or_create(self, key, factory):
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self.stats.hits += 1
                return entry
            self.stats.misses += 1
            entry = factory()
            self._entries[key] = entry
            return entry

    def __len__(self):
        return len(self._entries)

    def clear(self):
        with self._lock:
            self._entries.clear()
            self.stats = CacheStats()


kernel_cache = _Cache()
specialization_cache = _Cache()


def _evaluate(node, env: dict):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        return env[node.id]
    if isinstance(node, Neg):
        return np.negative(_evaluate(node.operand, env))
    if isinstance(node, BinOp):
        return _BINARY[node.op](_evaluate(node.left, env), _evaluate(node.right, env))
    if isinstance(node, Call):
        return _CALLS[node.func](*(_evaluate(a, env) for a in node.args))
    raise TypeError(f"cannot evaluate {node!r}")


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.numpy()
    if hasattr(x, "data") and isinstance(getattr(x, "data"), Tensor):
        return x.data.numpy()
    return np.asarray(x)


def _dtype_name(dt) -> str:
    dt = np.dtype(dt)
    if dt == T.F32:
        return "float32"
    if dt == T.F64:
        return "float64"
    raise TypeError(f"kernel arguments must be float32 or float64, got {dt}")


@dataclass(frozen=True)
class ConcreteKernel:
    """A kernel with every generic letter bound to a dtype."""

    kernel: "Kernel"
    input_dtypes: tuple
    output_dtype: np.dtype

    def evaluate(self, args) -> np.ndarray:
        k = self.kernel
        arrays = [np.asarray(_as_array(a)).astype(dt, copy=False) for a, dt in zip(args, self.input_dtypes)]
        shape = T.broadcast_shape(*(a.shape for a in arrays))
        env = {p.name: a for p, a in zip(k.inputs, arrays)}
        with np.errstate(all="ignore"):
            out = _evaluate(k.body.value, env)
        out = np.broadcast_to(np.asarray(out), shape)
        return np.array(out, dtype=self.output_dtype, copy=True)


@dataclass(eq=False)
class Kernel:
    kind: str
    inputs: tuple
    outputs: tuple
    body: Assign
    name: str
    fold_op: str | None = None
    identity: float | None = None
    key: tuple = field(default=())

    @property
    def output(self) -> ParamDecl:
        return self.outputs[0]

    def resolve(self, dtypes) -> ConcreteKernel:
        """Bind generic letters to the given input dtypes."""
        dtypes = tuple(_dtype_name(d) for d in dtypes)
        if len(dtypes) != len(self.inputs):
            raise TypeError(f"{self.name}: expected {len(self.inputs)} inputs, got {len(dtypes)}")
        return specialization_cache.get_or_create((self.key, dtypes), lambda: self._specialize(dtypes))

    def _specialize(self, dtypes) -> ConcreteKernel:
        bindings: dict[str, str] = {}
        resolved = []
        for p, dt in zip(self.inputs, dtypes):
            if p.is_generic:
                bound = bindings.setdefault(p.type_spec, dt)
                if bound != dt:
                    raise BindingError(
                        f"{self.name}: type {p.type_spec} bound to both {bound} and {dt} (argument {p.name!r})"
                    )
                resolved.append(np.dtype(dt))
            else:
                resolved.append(np.dtype(CONCRETE_TYPES[p.type_spec]))
        out = self.output
        if out.is_generic:
            if out.type_spec not in bindings:
                raise BindingError(f"{self.name}: output type {out.type_spec} is not bound by any input")
            out_dt = np.dtype(bindings[out.type_spec])
        else:
            out_dt = np.dtype(CONCRETE_TYPES[out.type_spec])
        return ConcreteKernel(self, tuple(resolved), out_dt)

    def __call__(self, *args, axis=None, keepdims=False) -> Tensor:
        arrays = [_as_array(a) for a in args]
        for a in arrays:
            if a.dtype.kind != "f":
                raise TypeError(f"{self.name}: kernel arguments must be float arrays, got {a.dtype}")
        concrete = self.resolve([a.dtype for a in arrays])
        mapped = concrete.evaluate(arrays)
        if self.kind == "elementwise":
            return Tensor._wrap(mapped)
        return self._fold(mapped, axis, keepdims)

    def _fold(self, mapped: np.ndarray, axis, keepdims) -> Tensor:
        op, identity = FOLDS[self.fold_op]
        axes = T.normalize_axes(axis, mapped.ndim)
        if any(mapped.shape[ax] == 0 for ax in axes):
            shape = tuple(1 if i in axes else d for i, d in enumerate(mapped.shape))
            if not keepdims:
                shape = tuple(d for i, d in enumerate(mapped.shape) if i not in axes)
            return T.alloc(shape, mapped.dtype, self.identity)
        if not axes:
            return Tensor._wrap(mapped)
        return T.reduce(op, Tensor._wrap(mapped), axes, keepdims)


def _build(kind, in_sig, out_sig, expr, name, fold_op=None, identity=None) -> Kernel:
    inputs = tuple(parse_signature(in_sig))
    outputs = tuple(parse_signature(out_sig))
    body = parse_expr(expr)
    in_names = {p.name for p in inputs}
    out_names = {p.name for p in outputs}
    clash = in_names & out_names
    if clash:
        raise KernelCompileError(f"{name}: names used as both input and output: {sorted(clash)}")
    if len(outputs) != 1:
        raise KernelCompileError(f"{name}: exactly one output parameter is supported, got {len(outputs)}")
    if body.target not in out_names:
        if body.target in in_names:
            raise KernelCompileError(f"{name}: cannot assign to input {body.target!r}")
        raise KernelCompileError(f"{name}: assignment target {body.target!r} is not an output")
    for ident in sorted(names(body)):
        if ident in out_names:
            raise KernelCompileError(f"{name}: output {ident!r} is read before it is assigned")
        if ident not in in_names:
            raise KernelCompileError(f"{name}: unresolved identifier {ident!r}")
    out = outputs[0]
    if out.is_generic and out.type_spec not in {p.type_spec for p in inputs}:
        raise KernelCompileError(f"{name}: output type {out.type_spec} is not bound by any input")
    if kind == "reduction":
        if fold_op not in FOLDS:
            raise KernelCompileError(f"{name}: fold operator must be one of {sorted(FOLDS)}")
        expected = FOLDS[fold_op][1]
        if identity is None:
            identity = expected
        if float(identity) != expected:
            raise KernelCompileError(f"{name}: identity {identity} is inconsistent with fold {fold_op!r}")
        identity = float(identity)
    key = (kind, in_sig, out_sig, expr, name, fold_op, identity)
    return Kernel(kind, inputs, outputs, body, name, fold_op, identity, key)


def compile_elementwise(in_sig: str, out_sig: str, expr: str, name: str = "kernel") -> Kernel:
    """Compile (or fetch from the cache) an elementwise kernel."""
    key = ("elementwise", in_sig, out_sig, expr, name)
    return kernel_cache.get_or_create(key, lambda: _build("elementwise", in_sig, out_sig, expr, name))


def compile_reduction(
    in_sig: str,
    out_sig: str,
    map_expr: str,
    fold_op: str = "+",
    identity: float | None = None,
    name: str = "reduce_kernel",
) -> Kernel:
    """Compile a kernel that maps each element with ``map_expr`` then folds."""
    key = ("reduction", in_sig, out_sig, map_expr, name, fold_op, identity)
    return kernel_cache.get_or_create(
        key, lambda: _build("reduction", in_sig, out_sig, map_expr, name, fold_op, identity)
    )


def resolve_generic(kernel: Kernel, dtypes) -> ConcreteKernel:
    return kernel.resolve(dtypes)


# Names matching the array-library API this mirrors.
ElementwiseKernel = compile_elementwise
ReductionKernel = compile_reduction
