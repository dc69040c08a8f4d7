"""Finite-difference checks for the differentiable operations.

The error measure is normwise: ``max|a - n| / max(max|a|, max|n|)`` over
each input's gradient, where ``a`` is the analytic gradient and ``n`` the
central difference. Zero against zero counts as no error. The normwise
form keeps individual components that are exactly zero from turning
round-off into huge relative errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import functions as F
from .autograd import Variable, grad, no_backprop_mode

DEFAULT_H = 1e-6
DEFAULT_TOL = 1e-6
SECOND_ORDER_TOL = 1e-4
KINK_MARGIN = 1e-2


def normwise_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def numerical_grad(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray], h: float = DEFAULT_H):
    """Central differences of the scalar function ``f`` at every component of every input."""
    grads = []
    for i, x in enumerate(xs):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            fp = f(xs)
            x[idx] = orig - h
            fm = f(xs)
            x[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


@dataclass
class GradcheckReport:
    name: str
    first_order_error: float
    second_order_error: float | None
    tol: float
    second_order_tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def line(self) -> str:
        second = "n/a" if self.second_order_error is None else f"{self.second_order_error:.2e}"
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name:24s} 1st {self.first_order_error:.2e}  2nd {second}"


def _standard_normal(rng, shape):
    return rng.normal(size=shape)


def gradcheck(
    fn: Callable[..., Variable],
    shapes: Sequence[tuple],
    seed: int = 0,
    *,
    name: str | None = None,
    sampler: Callable[[np.random.Generator, tuple], np.ndarray] = _standard_normal,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    second_order: bool = True,
    second_order_tol: float = SECOND_ORDER_TOL,
) -> GradcheckReport:
    """Compare analytic gradients of ``fn`` against central differences on f64 inputs.

    A non-scalar output is contracted with a fixed random weight so one
    scalar objective covers every output component. With ``second_order``
    the gradient graph is differentiated again along a random direction and
    compared to central differences of the analytic gradient.
    """
    rng = np.random.default_rng(seed)
    xs = [np.asarray(sampler(rng, tuple(s)), dtype=np.float64) for s in shapes]
    name = name or getattr(fn, "__name__", "fn")

    with no_backprop_mode():
        y0 = fn(*[Variable(x.copy(), requires_grad=False) for x in xs])
    gy = rng.normal(size=y0.shape)

    def objective(arrays):
        with no_backprop_mode():
            y = fn(*[Variable(a.copy(), requires_grad=False) for a in arrays])
        return float(np.sum(gy * y.array))

    def analytic(arrays, double=False):
        vs = [Variable(a.copy()) for a in arrays]
        y = fn(*vs)
        return vs, grad([y], vs, [Variable(gy.copy(), requires_grad=False)], enable_double_backprop=double)

    failures = []
    _, gs = analytic(xs)
    ns = numerical_grad(objective, [x.copy() for x in xs], h)
    err1 = max((normwise_error(g.array, n) for g, n in zip(gs, ns)), default=0.0)
    if not err1 <= tol:
        failures.append(f"first-order error {err1:.3e} > {tol:.0e}")

    err2 = None
    if second_order:
        vs_dir = [rng.normal(size=x.shape) for x in xs]
        vs, gs = analytic(xs, double=True)
        s = None
        for g, v in zip(gs, vs_dir):
            term = F.sum(g * Variable(v, requires_grad=False))
            s = term if s is None else s + term
        hvp = grad([s], vs)

        def grads_at(step):
            _, g = analytic([x + step * v for x, v in zip(xs, vs_dir)])
            return [gi.array for gi in g]

        plus, minus = grads_at(h), grads_at(-h)
        err2 = max(
            (normwise_error(hv.array, (p - m) / (2 * h)) for hv, p, m in zip(hvp, plus, minus)),
            default=0.0,
        )
        if not err2 <= second_order_tol:
            failures.append(f"second-order error {err2:.3e} > {second_order_tol:.0e}")
    return GradcheckReport(name, err1, err2, tol, second_order_tol, failures)


# samplers for ops with restricted or non-smooth domains


def _away_from_kink(rng, shape):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + KINK_MARGIN)


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + 0.5)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


@dataclass(frozen=True)
class CatalogCase:
    name: str
    op: str
    fn: Callable[..., Variable]
    shapes: tuple
    samplers: tuple | None = None
    tol: float = DEFAULT_TOL

    def sampler(self):
        if self.samplers is None:
            return _standard_normal
        samplers = list(self.samplers)
        counter = iter(range(len(samplers)))

        def sample(rng, shape):
            return samplers[next(counter) % len(samplers)](rng, shape)

        return sample


_LABELS = np.array([0, 2, 1, 2])

CATALOG: tuple[CatalogCase, ...] = (
    CatalogCase("identity", "identity", F.identity, ((3,),)),
    CatalogCase("add_broadcast", "add", F.add, ((2, 3), (3,))),
    CatalogCase("sub_broadcast", "sub", F.sub, ((2, 3), (2, 1))),
    CatalogCase("mul_broadcast", "mul", F.mul, ((2, 3), (1, 3))),
    CatalogCase("div", "div", F.div, ((2, 3), (3,)), (_standard_normal, _away_from_zero)),
    CatalogCase("neg", "neg", F.neg, ((4,),)),
    CatalogCase("matmul", "matmul", F.matmul, ((2, 3), (3, 2))),
    CatalogCase("linear", "linear", F.linear, ((4, 3), (2, 3), (2,))),
    CatalogCase("linear_nobias", "linear", F.linear, ((4, 3), (2, 3))),
    CatalogCase("relu", "relu", F.relu, ((3, 4),), (_away_from_kink,)),
    CatalogCase("tanh", "tanh", F.tanh, ((3,),)),
    CatalogCase("exp", "exp", F.exp, ((3,),)),
    CatalogCase("log", "log", F.log, ((3,),), (_positive,)),
    CatalogCase("sum_all", "sum", F.sum, ((2, 3),)),
    CatalogCase("sum_axis1", "sum", lambda x: F.sum(x, axis=1), ((2, 3),)),
    CatalogCase("mean_keepdims", "mean", lambda x: F.mean(x, axis=0, keepdims=True), ((3, 2),)),
    CatalogCase("reshape", "reshape", lambda x: F.reshape(x, (3, 2)), ((2, 3),)),
    CatalogCase("transpose", "transpose", lambda x: F.transpose(x, (2, 0, 1)), ((2, 3, 4),)),
    CatalogCase("broadcast_to", "broadcast_to", lambda x: F.broadcast_to(x, (2, 3, 4)), ((3, 1),)),
    CatalogCase("sum_to", "sum_to", lambda x: F.sum_to(x, (3, 1)), ((2, 3, 4),)),
    CatalogCase(
        "softmax_cross_entropy", "softmax_cross_entropy", lambda x: F.softmax_cross_entropy(x, _LABELS), ((4, 3),)
    ),
    CatalogCase("tanh_of_product", "tanh", lambda a, b: F.tanh(a * b), ((3,), (3,))),
    CatalogCase("softmax", "exp", F.softmax, ((4, 3),)),
)


def run_catalog(seeds: Sequence[int] = (0,), cases: Sequence[CatalogCase] = CATALOG) -> list[GradcheckReport]:
    reports = []
    for case in cases:
        for s in seeds:
            reports.append(
                gradcheck(case.fn, case.shapes, s, name=case.name, sampler=case.sampler(), tol=case.tol)
            )
    return reports
