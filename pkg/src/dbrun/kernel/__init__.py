from .compile import (
    BindingError,
    ConcreteKernel,
    ElementwiseKernel,
    Kernel,
    ReductionKernel,
    compile_elementwise,
    compile_reduction,
    kernel_cache,
    resolve_generic,
    specialization_cache,
)
from .parser import (
    KernelCompileError,
    KernelSyntaxError,
    ParamDecl,
    parse_expr,
    parse_signature,
    to_source,
)

__all__ = [
    "BindingError",
    "ConcreteKernel",
    "ElementwiseKernel",
    "Kernel",
    "KernelCompileError",
    "KernelSyntaxError",
    "ParamDecl",
    "ReductionKernel",
    "compile_elementwise",
    "compile_reduction",
    "kernel_cache",
    "parse_expr",
    "parse_signature",
    "resolve_generic",
    "specialization_cache",
    "to_source",
]
