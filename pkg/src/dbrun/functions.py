"""Differentiable operations.

Every backward is written with differentiable operations, so running it
with backprop enabled records a graph that can itself be differentiated.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .autograd import FunctionNode, Variable, as_variable
from .tensor import Tensor


def _unary(fn, x):
    (y,) = fn.apply((x,))
    return y


def _binary_operands(a, b):
    if not isinstance(a, Variable):
        a = as_variable(a, like=b if isinstance(b, Variable) else None)
    if not isinstance(b, Variable):
        b = as_variable(b, like=a)
    return a, b


class Identity(FunctionNode):
    def forward(self, inputs):
        (x,) = inputs
        return (T.Tensor._wrap(x.numpy().copy()),)

    def backward(self, indexes, grad_outputs):
        return grad_outputs


class Add(FunctionNode):
    def forward(self, inputs):
        a, b = inputs
        self.shapes = (a.shape, b.shape)
        return (T.add(a, b),)

    def backward(self, indexes, grad_outputs):
        (gy,) = grad_outputs
        return sum_to(gy, self.shapes[0]), sum_to(gy, self.shapes[1])


class Sub(FunctionNode):
    def forward(self, inputs):
        a, b = inputs
        self.shapes = (a.shape, b.shape)
        return (T.sub(a, b),)

    def backward(self, indexes, grad_outputs):
        (gy,) = grad_outputs
        return sum_to(gy, self.shapes[0]), sum_to(neg(gy), self.shapes[1])


class Mul(FunctionNode):
    def forward(self, inputs):
        self.retain_inputs((0, 1))
        a, b = inputs
        return (T.mul(a, b),)

    def backward(self, indexes, grad_outputs):
        a, b = self.get_retained_inputs()
        (gy,) = grad_outputs
        ga = sum_to(gy * b, a.shape) if 0 in indexes else None
        gb = sum_to(gy * a, b.shape) if 1 in indexes else None
        return ga, gb


class Div(FunctionNode):
    def forward(self, inputs):
        self.retain_inputs((0, 1))
        a, b = inputs
        return (T.div(a, b),)

    def backward(self, indexes, grad_outputs):
        a, b = self.get_retained_inputs()
        (gy,) = grad_outputs
        ga = sum_to(gy / b, a.shape) if 0 in indexes else None
        gb = sum_to(neg(gy * a / (b * b)), b.shape) if 1 in indexes else None
        return ga, gb


class Neg(FunctionNode):
    def forward(self, inputs):
        return (T.unary("neg", inputs[0]),)

    def backward(self, indexes, grad_outputs):
        return (neg(grad_outputs[0]),)


class MatMul(FunctionNode):
    def forward(self, inputs):
        self.retain_inputs((0, 1))
        a, b = inputs
        return (T.matmul(a, b),)

    def backward(self, indexes, grad_outputs):
        a, b = self.get_retained_inputs()
        (gy,) = grad_outputs
        ga = matmul(gy, transpose(b)) if 0 in indexes else None
        gb = matmul(transpose(a), gy) if 1 in indexes else None
        return ga, gb


class Linear(FunctionNode):
    """``x @ W.T + b`` with ``x`` of shape (batch, n_in), ``W`` (n_out, n_in)."""

    def forward(self, inputs):
        self.retain_inputs((0, 1))
        x, W = inputs[:2]
        if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
            raise T.ShapeError(f"linear: x {x.shape} incompatible with W {W.shape}")
        y = T.matmul(x, T.transpose(W))
        if len(inputs) == 3:
            b = inputs[2]
            if b.shape != (W.shape[0],):
                raise T.ShapeError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
            y = T.add(y, b)
        return (y,)

    def backward(self, indexes, grad_outputs):
        x, W = self.get_retained_inputs()
        (gy,) = grad_outputs
        gx = matmul(gy, W) if 0 in indexes else None
        gW = matmul(transpose(gy), x) if 1 in indexes else None
        if len(self.inputs) == 2:
            return gx, gW
        gb = sum(gy, axis=0) if 2 in indexes else None
        return gx, gW, gb


class ReLU(FunctionNode):
    def forward(self, inputs):
        self.retain_inputs((0,))
        (x,) = inputs
        return (T.ewise("max", x, T.scalar(0.0, x.dtype)),)

    def backward(self, indexes, grad_outputs):
        (x,) = self.get_retained_inputs()
        mask = Variable(T.positive_mask(x.data), requires_grad=False)
        return (grad_outputs[0] * mask,)


class Tanh(FunctionNode):
    def forward(self, inputs):
        self.retain_outputs((0,))
        return (T.unary("tanh", inputs[0]),)

    def backward(self, indexes, grad_outputs):
        (y,) = self.get_retained_outputs()
        (gy,) = grad_outputs
        return (gy * (1.0 - y * y),)


class Exp(FunctionNode):
    def forward(self, inputs):
        self.retain_outputs((0,))
        return (T.unary("exp", inputs[0]),)

    def backward(self, indexes, grad_outputs):
        (y,) = self.get_retained_outputs()
        return (grad_outputs[0] * y,)


class Log(FunctionNode):
    def forward(self, inputs):
        self.retain_inputs((0,))
        return (T.unary("log", inputs[0]),)

    def backward(self, indexes, grad_outputs):
        (x,) = self.get_retained_inputs()
        return (grad_outputs[0] / x,)


class Sum(FunctionNode):
    def __init__(self, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, inputs):
        (x,) = inputs
        self.in_shape = x.shape
        self.axes = T.normalize_axes(self.axis, x.ndim)
        return (T.reduce("sum", x, self.axes, self.keepdims),)

    def backward(self, indexes, grad_outputs):
        (gy,) = grad_outputs
        if not self.keepdims and self.axes:
            kept = tuple(1 if i in self.axes else d for i, d in enumerate(self.in_shape))
            gy = reshape(gy, kept)
        return (broadcast_to(gy, self.in_shape),)


class Mean(FunctionNode):
    def __init__(self, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, inputs):
        (x,) = inputs
        self.in_shape = x.shape
        self.axes = T.normalize_axes(self.axis, x.ndim)
        n = 1
        for ax in self.axes:
            n *= x.shape[ax]
        self.n = n
        s = T.reduce("sum", x, self.axes, self.keepdims)
        return (T.div(s, T.scalar(float(n), x.dtype)),)

    def backward(self, indexes, grad_outputs):
        (gy,) = grad_outputs
        if not self.keepdims and self.axes:
            kept = tuple(1 if i in self.axes else d for i, d in enumerate(self.in_shape))
            gy = reshape(gy, kept)
        return (broadcast_to(gy, self.in_shape) / float(self.n),)


class Reshape(FunctionNode):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, inputs):
        self.in_shape = inputs[0].shape
        return (T.reshape(inputs[0], self.shape),)

    def backward(self, indexes, grad_outputs):
        return (reshape(grad_outputs[0], self.in_shape),)


class Transpose(FunctionNode):
    def __init__(self, axes=None):
        self.axes = None if axes is None else tuple(axes)

    def forward(self, inputs):
        return (T.transpose(inputs[0], self.axes),)

    def backward(self, indexes, grad_outputs):
        if self.axes is None:
            return (transpose(grad_outputs[0]),)
        inverse = tuple(int(i) for i in np.argsort([a % len(self.axes) for a in self.axes]))
        return (transpose(grad_outputs[0], inverse),)


class BroadcastTo(FunctionNode):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, inputs):
        self.in_shape = inputs[0].shape
        return (T.broadcast_to(inputs[0], self.shape),)

    def backward(self, indexes, grad_outputs):
        return (sum_to(grad_outputs[0], self.in_shape),)


class SumTo(FunctionNode):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, inputs):
        self.in_shape = inputs[0].shape
        return (T.sum_to(inputs[0], self.shape),)

    def backward(self, indexes, grad_outputs):
        return (broadcast_to(grad_outputs[0], self.in_shape),)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class SoftmaxCrossEntropy(FunctionNode):
    """Batch mean of ``-log softmax(logits)[label]``.

    Labels are integer class indices held on the node; they are not graph
    inputs and receive no gradient.
    """

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)

    def forward(self, inputs):
        self.retain_inputs((0,))
        (x,) = inputs
        if x.ndim != 2 or self.labels.shape != (x.shape[0],):
            raise T.ShapeError(f"softmax_cross_entropy: logits {x.shape} vs labels {self.labels.shape}")
        if x.shape[0] and (self.labels.min() < 0 or self.labels.max() >= x.shape[1]):
            raise ValueError("label out of range")
        logp = _log_softmax(x.numpy())
        n = x.shape[0]
        loss = -logp[np.arange(n), self.labels].sum() / max(n, 1)
        return (T.Tensor._wrap(np.asarray(loss, dtype=x.dtype)),)

    def backward(self, indexes, grad_outputs):
        (x,) = self.get_retained_inputs()
        (gy,) = grad_outputs
        n, c = x.shape
        shift = Variable(T.Tensor._wrap(x.array.max(axis=1, keepdims=True)), requires_grad=False)
        e = exp(x - shift)
        p = e / broadcast_to(sum(e, axis=1, keepdims=True), x.shape)
        onehot = np.zeros((n, c), dtype=x.dtype)
        onehot[np.arange(n), self.labels] = 1.0
        scale = broadcast_to(gy / float(max(n, 1)), x.shape)
        return ((p - Variable(T.Tensor._wrap(onehot), requires_grad=False)) * scale,)


def identity(x):
    return _unary(Identity(), x)


def add(a, b):
    a, b = _binary_operands(a, b)
    return Add().apply((a, b))[0]


def sub(a, b):
    a, b = _binary_operands(a, b)
    return Sub().apply((a, b))[0]


def mul(a, b):
    a, b = _binary_operands(a, b)
    return Mul().apply((a, b))[0]


def div(a, b):
    a, b = _binary_operands(a, b)
    return Div().apply((a, b))[0]


def neg(x):
    return _unary(Neg(), x)


def matmul(a, b):
    a, b = _binary_operands(a, b)
    return MatMul().apply((a, b))[0]


def linear(x, W, b=None):
    args = (x, W) if b is None else (x, W, b)
    return Linear().apply(args)[0]


def relu(x):
    return _unary(ReLU(), x)


def tanh(x):
    return _unary(Tanh(), x)


def exp(x):
    return _unary(Exp(), x)


def log(x):
    return _unary(Log(), x)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return _unary(Sum(axis, keepdims), x)


def mean(x, axis=None, keepdims=False):
    return _unary(Mean(axis, keepdims), x)


def reshape(x, shape):
    if isinstance(x, Variable) and tuple(x.shape) == tuple(shape):
        return x
    return _unary(Reshape(shape), x)


def transpose(x, axes=None):
    return _unary(Transpose(axes), x)


def broadcast_to(x, shape):
    if isinstance(x, Variable) and tuple(x.shape) == tuple(shape):
        return x
    return _unary(BroadcastTo(shape), x)


def sum_to(x, shape):
    if isinstance(x, Variable) and tuple(x.shape) == tuple(shape):
        return x
    return _unary(SumTo(shape), x)


def softmax_cross_entropy(logits, labels):
    return _unary(SoftmaxCrossEntropy(labels), logits)


def softmax(x):
    """Row-wise softmax of a 2-d variable, built from differentiable ops."""
    shift = Variable(T.Tensor._wrap(x.array.max(axis=1, keepdims=True)), requires_grad=False)
    e = exp(x - shift)
    return e / broadcast_to(sum(e, axis=1, keepdims=True), x.shape)


def _rsub(a, b):
    return sub(b, a)


def _rdiv(a, b):
    return div(b, a)


Variable.__add__ = add
Variable.__radd__ = add
Variable.__sub__ = sub
Variable.__rsub__ = _rsub
Variable.__mul__ = mul
Variable.__rmul__ = mul
Variable.__truediv__ = div
Variable.__rtruediv__ = _rdiv
Variable.__neg__ = neg
Variable.__matmul__ = matmul
Variable.__rmatmul__ = lambda a, b: matmul(b, a)
Variable.T = property(lambda self: transpose(self))
Variable.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
Variable.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)


_OPS = {
    "identity": Identity,
    "add": Add,
    "sub": Sub,
    "mul": Mul,
    "div": Div,
    "neg": Neg,
    "matmul": MatMul,
    "linear": Linear,
    "relu": ReLU,
    "tanh": Tanh,
    "exp": Exp,
    "log": Log,
    "sum": Sum,
    "mean": Mean,
    "reshape": Reshape,
    "transpose": Transpose,
    "broadcast_to": BroadcastTo,
    "sum_to": SumTo,
    "softmax_cross_entropy": SoftmaxCrossEntropy,
}


def op_catalog() -> dict[str, type[FunctionNode]]:
    """Registered differentiable operations by name."""
    return dict(_OPS)
