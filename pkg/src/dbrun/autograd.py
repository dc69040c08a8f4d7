"""Define-by-Run reverse-mode automatic differentiation.

The graph is recorded while the forward computation runs. User code holds
:class:`Variable` objects; the graph is made of :class:`VariableNode` and
:class:`FunctionNode` objects. A variable node references array data only
when some function declared it as a retained input, so array memory is
released together with the last user handle unless backward needs it.

Function nodes never hold strong references to their output nodes. When a
retained output is needed during backward and its node is already gone, a
fresh node is rebuilt from the backup tensor kept on the function node.
"""

from __future__ import annotations

import contextlib
import heapq
import itertools
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, registry


class RetentionError(RuntimeError):
    """Backward touched an array that its forward did not declare as retained."""


class GraphError(RuntimeError):
    pass


_config = threading.local()


def backprop_enabled() -> bool:
    return getattr(_config, "enable_backprop", True)


@contextlib.contextmanager
def using_backprop(flag: bool):
    old = backprop_enabled()
    _config.enable_backprop = flag
    try:
        yield
    finally:
        _config.enable_backprop = old


def no_backprop_mode():
    return using_backprop(False)


class VariableNode:
    __slots__ = (
        "creator",
        "rank",
        "index",
        "retained_data",
        "shape",
        "dtype",
        "requires_grad",
        "_retain_count",
        "_variable",
        "__weakref__",
    )

    def __init__(self, variable: "Variable", requires_grad: bool = True):
        self.creator: FunctionNode | None = None
        self.rank = 0
        self.index = 0
        self.retained_data: Tensor | None = None
        self.shape = variable.data.shape
        self.dtype = variable.data.dtype
        self.requires_grad = requires_grad
        self._retain_count = 0
        self._variable = weakref.ref(variable)

    @property
    def variable(self) -> "Variable | None":
        return self._variable()

    def _set_creator(self, fn: "FunctionNode", index: int) -> None:
        self.creator = fn
        self.index = index
        self.rank = fn.rank + 1

    def _retain(self, data: Tensor) -> None:
        self._retain_count += 1
        self.retained_data = data
        registry.tag(data, "retained")

    def _unretain(self) -> None:
        self._retain_count -= 1
        if self._retain_count <= 0:
            self._retain_count = 0
            self.retained_data = None

    def __repr__(self):
        creator = type(self.creator).__name__ if self.creator else None
        return f"<VariableNode shape={self.shape} rank={self.rank} creator={creator}>"


class Variable:
    """User-facing differentiable value.

    ``grad`` lives here rather than on the node: a gradient refers back
    into the graph, and putting it on the node would create a cycle.
    """

    __array_priority__ = 200

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        if isinstance(data, Variable):
            data = data.data
        self.data: Tensor = T.as_tensor(data)
        self.node = VariableNode(self, requires_grad)
        self.grad: Variable | None = None
        self.name = name

    @classmethod
    def _on_node(cls, data: Tensor, node: VariableNode) -> "Variable":
        # extra handle on an existing node; the node keeps its original owner
        v = cls.__new__(cls)
        v.data = data
        v.node = node
        v.grad = None
        v.name = None
        return v

    @property
    def array(self) -> np.ndarray:
        return self.data.numpy()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def creator(self) -> "FunctionNode | None":
        return self.node.creator

    @property
    def rank(self) -> int:
        return self.node.rank

    @property
    def requires_grad(self) -> bool:
        return self.node.requires_grad

    def item(self) -> float:
        return self.data.item()

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        return f"Variable({self.array!r})"

    def cleargrad(self) -> None:
        self.grad = None

    def backward(
        self,
        retain_intermediate_grads: bool = False,
        enable_double_backprop: bool = False,
        hook: Callable[["FunctionNode"], None] | None = None,
    ) -> None:
        """Accumulate gradients of this variable into every reachable leaf.

        A scalar variable is seeded with 1; otherwise ``self.grad`` must be
        set beforehand. Processed function nodes are unlinked from the graph
        as the traversal proceeds, unless ``enable_double_backprop`` is set.
        """
        seed = self.grad
        if seed is None:
            if self.size != 1:
                raise GraphError("backward() on a non-scalar output requires an explicit seed in .grad")
            seed = Variable(T.ones_like(self.data), requires_grad=False)
        elif seed.shape != self.shape:
            raise GraphError(f"seed shape {seed.shape} does not match output shape {self.shape}")
        # the driver drops the seed once delivered; keep no local reference
        seeds = [seed]
        del seed
        result = _backprop(
            [self.node],
            seeds,
            wanted=None,
            retain_grad=retain_intermediate_grads,
            double=enable_double_backprop,
            hook=hook,
        )
        for node, g in result.items():
            var = node.variable
            if var is None or var is self:
                continue
            var.grad = g if var.grad is None else _accumulate(var.grad, g)


def as_variable(x, like: Variable | None = None) -> Variable:
    if isinstance(x, Variable):
        return x
    if isinstance(x, Tensor):
        return Variable(x, requires_grad=False)
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(dtype or T.F64)
    return Variable(Tensor(arr), requires_grad=False)


class FunctionNode:
    """One recorded application of a differentiable operation.

    Subclasses implement ``forward(inputs)`` over raw tensors and
    ``backward(target_indexes, grad_outputs)`` over variables, declaring
    what backward needs through :meth:`retain_inputs` and
    :meth:`retain_outputs` inside ``forward``.
    """

    rank = 0
    inputs: tuple[VariableNode, ...] | None = None
    outputs: tuple = ()
    _retained_input_indexes: tuple[int, ...] = ()
    _retained_output_indexes: tuple[int, ...] = ()
    _output_backups: dict | None = None
    _output_meta: tuple = ()
    replay_count = 0

    def forward(self, inputs: tuple[Tensor, ...]) -> tuple[Tensor, ...]:
        raise NotImplementedError

    def backward(self, target_input_indexes, grad_outputs):
        raise NotImplementedError

    @property
    def label(self) -> str:
        return type(self).__name__

    def retain_inputs(self, indexes: Iterable[int]) -> None:
        self._retained_input_indexes = tuple(indexes)

    def retain_outputs(self, indexes: Iterable[int]) -> None:
        self._retained_output_indexes = tuple(indexes)

    @property
    def retained_input_indexes(self) -> tuple[int, ...]:
        return self._retained_input_indexes

    @property
    def retained_output_indexes(self) -> tuple[int, ...]:
        return self._retained_output_indexes

    def apply(self, inputs: Sequence) -> tuple[Variable, ...]:
        if self.inputs is not None or self.outputs:
            raise GraphError(f"{self.label} node was already applied")
        first = next((x for x in inputs if isinstance(x, Variable)), None)
        in_vars = [as_variable(x, like=first) for x in inputs]
        in_data = tuple(v.data for v in in_vars)
        self._retained_input_indexes = ()
        self._retained_output_indexes = ()
        out_data = self.forward(in_data)
        if isinstance(out_data, Tensor):
            out_data = (out_data,)
        out_data = tuple(out_data)
        out_vars = tuple(Variable(y) for y in out_data)

        record = backprop_enabled() and any(v.node.requires_grad for v in in_vars)
        if not record:
            for y in out_vars:
                y.node.requires_grad = False
            self._retained_input_indexes = ()
            self._retained_output_indexes = ()
            return out_vars

        for i in self._retained_input_indexes:
            if not 0 <= i < len(in_vars):
                raise IndexError(f"{self.label}: retained input index {i} out of range")
        for i in self._retained_output_indexes:
            if not 0 <= i < len(out_vars):
                raise IndexError(f"{self.label}: retained output index {i} out of range")

        self.inputs = tuple(v.node for v in in_vars)
        self.rank = max(n.rank for n in self.inputs)
        for i in self._retained_input_indexes:
            self.inputs[i]._retain(in_data[i])
        self._output_backups = {}
        for i in self._retained_output_indexes:
            self._output_backups[i] = out_data[i]
            registry.tag(out_data[i], "retained_output")
        self._output_meta = tuple((y.shape, y.dtype) for y in out_data)
        for i, y in enumerate(out_vars):
            y.node._set_creator(self, i)
        self.outputs = tuple(weakref.ref(y.node) for y in out_vars)
        return out_vars

    def retained_input(self, index: int) -> Variable:
        if index not in self._retained_input_indexes:
            raise RetentionError(f"{self.label}: input {index} was not declared retained")
        if self.inputs is None:
            raise GraphError(f"{self.label}: graph already released")
        node = self.inputs[index]
        return Variable._on_node(node.retained_data, node)

    def get_retained_inputs(self) -> tuple[Variable, ...]:
        return tuple(self.retained_input(i) for i in self._retained_input_indexes)

    def retained_output(self, index: int) -> Variable:
        """Variable for a retained output, rebuilding its node if it was released."""
        if index not in self._retained_output_indexes:
            raise RetentionError(f"{self.label}: output {index} was not declared retained")
        if not self._output_backups or index not in self._output_backups:
            raise GraphError(f"{self.label}: graph already released")
        data = self._output_backups[index]
        node = self.outputs[index]()
        if node is not None:
            return Variable._on_node(data, node)
        var = Variable(data)
        var.node._set_creator(self, index)
        outputs = list(self.outputs)
        outputs[index] = weakref.ref(var.node)
        self.outputs = tuple(outputs)
        self.replay_count += 1
        return var

    def get_retained_outputs(self) -> tuple[Variable, ...]:
        return tuple(self.retained_output(i) for i in self._retained_output_indexes)

    def _sever(self) -> None:
        if self.inputs is not None:
            for i in self._retained_input_indexes:
                self.inputs[i]._unretain()
        self.inputs = None
        self._output_backups = None

    def __repr__(self):
        return f"<{self.label} rank={self.rank}>"


def retrieve_retained_output(fn: FunctionNode, index: int) -> Variable:
    return fn.retained_output(index)


def _accumulate(a: Variable, b: Variable) -> Variable:
    from .functions import add

    return add(a, b)


def _zeros_grad(shape, dtype) -> Variable:
    return Variable(T.alloc(shape, dtype, 0.0), requires_grad=False)


def _backprop(
    roots: Sequence[VariableNode],
    seeds: Sequence[Variable],
    *,
    wanted: Sequence[VariableNode] | None,
    retain_grad: bool,
    double: bool,
    hook: Callable[[FunctionNode], None] | None,
) -> dict[VariableNode, Variable]:
    """Run backward from ``roots`` and return gradients of the terminal nodes.

    With ``wanted`` unset, returns gradients for every reachable leaf;
    otherwise for exactly the wanted nodes (leaves or intermediates).
    Pending gradients are keyed by the creating function node so that
    output nodes need not be kept alive by the traversal itself.
    """
    pending: dict[FunctionNode, list] = {}
    terminal: dict[VariableNode, Variable] = {}
    heap: list = []
    counter = itertools.count()

    wanted_leaves: set[VariableNode] = set()
    wanted_outputs: dict[tuple[int, int], VariableNode] = {}
    if wanted is not None:
        for node in wanted:
            if node.creator is None:
                wanted_leaves.add(node)
            else:
                wanted_outputs[(id(node.creator), node.index)] = node

    def push(fn: FunctionNode):
        if fn not in pending:
            pending[fn] = [None] * len(fn.outputs)
            heapq.heappush(heap, (-fn.rank, next(counter), fn))

    def deliver(node: VariableNode, g: Variable):
        registry.tag(g.data, "grad")
        if node.creator is None:
            if wanted is None or node in wanted_leaves:
                prev = terminal.get(node)
                terminal[node] = g if prev is None else _accumulate(prev, g)
            return
        fn = node.creator
        if fn.inputs is None:
            # released by an earlier backward; the graph is cut here
            return
        push(fn)
        slot = pending[fn]
        prev = slot[node.index]
        slot[node.index] = g if prev is None else _accumulate(prev, g)

    with using_backprop(double):
        for node, seed in zip(roots, seeds):
            deliver(node, seed)
        seed = None
        seeds.clear()

        while heap:
            _, _, fn = heapq.heappop(heap)
            gys = pending.pop(fn)

            if retain_grad or wanted_outputs:
                for i, gy in enumerate(gys):
                    if gy is None:
                        continue
                    key = (id(fn), i)
                    if key in wanted_outputs:
                        node = wanted_outputs[key]
                        terminal[node] = gy
                    if retain_grad:
                        out_node = fn.outputs[i]()
                        var = out_node.variable if out_node is not None else None
                        if var is not None:
                            var.grad = gy

            gys = tuple(
                gy if gy is not None else _zeros_grad(*fn._output_meta[i]) for i, gy in enumerate(gys)
            )
            targets = tuple(i for i, n in enumerate(fn.inputs) if n.requires_grad)
            gxs = fn.backward(targets, gys)
            if isinstance(gxs, Variable) or gxs is None:
                gxs = (gxs,)
            gxs = tuple(gxs)
            if len(gxs) != len(fn.inputs):
                raise GraphError(f"{fn.label}.backward returned {len(gxs)} grads for {len(fn.inputs)} inputs")
            gx = None
            for i in targets:
                gx = gxs[i]
                if gx is None:
                    continue
                node = fn.inputs[i]
                if gx.shape != node.shape:
                    raise GraphError(
                        f"{fn.label}: gradient shape {gx.shape} does not match input {i} shape {node.shape}"
                    )
                deliver(node, gx)
            del gxs, gx, gys
            if not double:
                fn._sever()
            if hook is not None:
                hook(fn)
            del fn
    return terminal


def grad(
    outputs: Sequence[Variable],
    inputs: Sequence[Variable],
    grad_outputs: Sequence[Variable | None] | None = None,
    enable_double_backprop: bool = False,
    hook: Callable[[FunctionNode], None] | None = None,
) -> list[Variable]:
    """Gradients of ``outputs`` with respect to ``inputs``.

    Nothing is stored on any variable. Inputs unreachable from the outputs
    get zero gradients. With ``enable_double_backprop`` the returned
    gradients carry their own graphs and can be differentiated again.
    """
    outputs = list(outputs)
    inputs = list(inputs)
    if grad_outputs is None:
        grad_outputs = [None] * len(outputs)
    if len(grad_outputs) != len(outputs):
        raise ValueError("grad_outputs must match outputs")
    seeds = []
    for y, gy in zip(outputs, grad_outputs):
        if gy is None:
            if y.size != 1:
                raise GraphError("grad() on a non-scalar output requires an explicit seed")
            gy = Variable(T.ones_like(y.data), requires_grad=False)
        else:
            gy = as_variable(gy, like=y)
            if gy.shape != y.shape:
                raise GraphError(f"seed shape {gy.shape} does not match output shape {y.shape}")
        seeds.append(gy)

    # an input that is itself an output receives that output's seed
    wanted = [x.node for x in inputs]
    wanted_set = set(wanted)
    direct = {}
    for y, gy in zip(outputs, seeds):
        if y.node in wanted_set:
            prev = direct.get(y.node)
            direct[y.node] = gy if prev is None else _accumulate(prev, gy)

    roots = [y.node for y in outputs if y.node.creator is not None]
    root_seeds = [gy for y, gy in zip(outputs, seeds) if y.node.creator is not None]
    seeds = gy = None
    result = _backprop(roots, root_seeds, wanted=wanted, retain_grad=False, double=enable_double_backprop, hook=hook)

    grads = []
    for x in inputs:
        g = result.get(x.node)
        if x.node.creator is None and x.node in direct:
            g = direct[x.node] if g is None else _accumulate(g, direct[x.node])
        if g is None:
            g = _zeros_grad(x.shape, x.dtype)
        grads.append(g)
    return grads
