"""A small Define-by-Run deep learning framework on CPU."""

from . import functions
from .autograd import (
    FunctionNode,
    GraphError,
    RetentionError,
    Variable,
    VariableNode,
    grad,
    no_backprop_mode,
    retrieve_retained_output,
    using_backprop,
)
from .tensor import Tensor, registry

__all__ = [
    "FunctionNode",
    "GraphError",
    "RetentionError",
    "Tensor",
    "Variable",
    "VariableNode",
    "functions",
    "grad",
    "no_backprop_mode",
    "registry",
    "retrieve_retained_output",
    "using_backprop",
]
