import gc

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import dbrun.functions as F
from dbrun import tensor as T
from dbrun.autograd import (
    FunctionNode,
    GraphError,
    RetentionError,
    Variable,
    grad,
    no_backprop_mode,
    retrieve_retained_output,
)
from oracles import central_difference, rel_err


# -- graph recording


def test_leaf_rank_and_distinct_nodes():
    a = Variable([1.0, 2.0])
    b = Variable([1.0, 2.0])
    assert a.rank == 0 and a.creator is None
    assert a.node is not b.node
    y = F.tanh(a)
    assert y.rank == 1
    assert F.tanh(y).rank == 2


def test_retention_declarations():
    x = Variable([0.5, -0.25])
    y = F.tanh(x)
    assert y.creator.retained_output_indexes == (0,)
    assert y.creator.retained_input_indexes == ()
    assert x.node.retained_data is None

    a, b = Variable([1.0]), Variable([2.0])
    p = a * b
    assert p.creator.retained_input_indexes == (0, 1)
    assert a.node.retained_data is not None and b.node.retained_data is not None

    s = a + b
    assert s.creator.retained_input_indexes == () and s.creator.retained_output_indexes == ()


def test_no_backprop_mode_records_nothing():
    x = Variable([1.0])
    with no_backprop_mode():
        y = F.tanh(x)
    assert y.creator is None
    assert not y.requires_grad


def test_constants_do_not_record():
    c = Variable([1.0], requires_grad=False)
    assert F.tanh(c).creator is None


# -- backward


def test_sum_of_squares_grad_vs_finite_differences():
    x0 = np.array([1.0, 2.0, 3.0])
    # [DERIVED] central differences of sum(x*x) at h=1e-6
    expected = central_difference(lambda v: float(np.sum(v * v)), x0)
    np.testing.assert_allclose(expected, [2, 4, 6], atol=1e-8)
    x = Variable(x0)
    F.sum(x * x).backward()
    np.testing.assert_allclose(x.grad.array, expected, atol=1e-8)
    assert x.grad.array.tolist() == [2.0, 4.0, 6.0]


def test_identity_chain_gives_ones():
    x = Variable([1.0, -2.0])
    y = F.identity(F.identity(x))
    y.grad = Variable(np.ones(2), requires_grad=False)
    y.backward()
    assert x.grad.array.tolist() == [1.0, 1.0]


def test_fan_out_accumulates():
    x = Variable(3.0)
    (x + x).backward()
    assert x.grad.item() == 2.0


def test_backward_accumulates_across_calls():
    x = Variable(2.0)
    (x * x).backward()
    (x * x).backward()
    assert x.grad.item() == 8.0
    x.cleargrad()
    assert x.grad is None


def test_nonscalar_backward_requires_seed():
    x = Variable([1.0, 2.0])
    with pytest.raises(GraphError):
        F.tanh(x).backward()
    with pytest.raises(GraphError):
        grad([F.tanh(x)], [x])


def test_seed_shape_checked():
    x = Variable([1.0, 2.0])
    y = F.tanh(x)
    y.grad = Variable([1.0, 2.0, 3.0], requires_grad=False)
    with pytest.raises(GraphError):
        y.backward()


def test_backward_after_release_does_not_reach_leaves_again():
    x = Variable(1.5)
    y = F.tanh(x)
    y.backward()
    first = x.grad.item()
    y.backward()  # graph was severed by the first pass; nothing more flows
    assert x.grad.item() == first


# -- grad()


def test_tanh_first_and_second_derivative_at_zero():
    x = Variable(0.0)
    y = F.tanh(x)
    assert y.item() == 0.0
    (g,) = grad([y], [x], enable_double_backprop=True)
    assert g.item() == 1.0
    (h,) = grad([g], [x])
    assert h.item() == 0.0


def test_hvp_of_cubic_sum():
    x0 = np.array([1.0, 2.0])
    v = np.array([1.0, 1.0])
    x = Variable(x0)
    (g,) = grad([F.sum(x * x * x)], [x], enable_double_backprop=True)
    (hv,) = grad([F.sum(g * Variable(v, requires_grad=False))], [x])
    # [DERIVED] analytic 6x*v and a finite difference of the analytic gradient 3x^2
    assert (6 * x0 * v).tolist() == [6.0, 12.0]
    fd = (3 * (x0 + 1e-6 * v) ** 2 - 3 * (x0 - 1e-6 * v) ** 2) / 2e-6
    np.testing.assert_allclose(fd, [6, 12], rtol=1e-8)
    np.testing.assert_allclose(hv.array, [6.0, 12.0], rtol=1e-12)


def test_grad_stores_nothing_and_returns_zeros_for_unreachable():
    x = Variable([1.0, 2.0])
    unused = Variable([[5.0]])
    y = F.sum(F.tanh(x))
    gx, gu = grad([y], [x, unused])
    assert x.grad is None and unused.grad is None
    assert gu.array.tolist() == [[0.0]]
    np.testing.assert_allclose(gx.array, 1 - np.tanh([1.0, 2.0]) ** 2, rtol=1e-14)


def test_grad_wrt_intermediate_and_output():
    x = Variable([0.3, -0.7])
    h = F.tanh(x)
    y = F.sum(h * h)
    gh, gy = grad([y], [h, y])
    np.testing.assert_allclose(gh.array, 2 * np.tanh([0.3, -0.7]), rtol=1e-14)
    assert gy.item() == 1.0


def test_retain_intermediate_grads_agrees_with_grad():
    rng = np.random.default_rng(0)
    x0, w0 = rng.normal(size=(3,)), rng.normal(size=(3,))

    def build():
        x, w = Variable(x0), Variable(w0)
        h = F.tanh(x * w)
        return x, w, h, F.sum(h * h)

    # grad() unlinks the nodes it processes, so each path gets its own graph
    x, w, h, y = build()
    gh, gx, gw = grad([y], [h, x, w])
    x, w, h, y = build()
    y.backward(retain_intermediate_grads=True)
    assert np.array_equal(h.grad.array, gh.array)
    assert np.array_equal(x.grad.array, gx.array)
    assert np.array_equal(w.grad.array, gw.array)


def test_intermediate_grads_not_kept_by_default():
    x = Variable([0.1, 0.2])
    h = F.tanh(x)
    F.sum(h).backward()
    assert h.grad is None and x.grad is not None


# -- retention contract


class _PeekInput(FunctionNode):
    """Test double: declares no retention, then reads an input in backward."""

    def forward(self, inputs):
        return (T.unary("square", inputs[0]),)

    def backward(self, indexes, grad_outputs):
        x = self.retained_input(0)
        return (grad_outputs[0] * x * 2.0,)


class _PeekOutput(FunctionNode):
    def forward(self, inputs):
        self.retain_inputs((0,))
        return (T.unary("exp", inputs[0]),)

    def backward(self, indexes, grad_outputs):
        return (grad_outputs[0] * self.retained_output(0),)


def test_undeclared_input_access_raises():
    x = Variable([1.0])
    (y,) = _PeekInput().apply((x,))
    with pytest.raises(RetentionError):
        F.sum(y).backward()
    fn = _PeekInput()
    fn.apply((Variable([1.0]),))
    with pytest.raises(RetentionError):
        fn.retained_input(0)


def test_undeclared_output_access_raises():
    (y,) = _PeekOutput().apply((Variable([1.0]),))
    with pytest.raises(RetentionError):
        F.sum(y).backward()


def test_node_cannot_be_applied_twice():
    fn = F.Tanh()
    fn.apply((Variable([1.0]),))
    with pytest.raises(GraphError):
        fn.apply((Variable([1.0]),))


# -- output replay


class _TanhPair(FunctionNode):
    """Two outputs, tanh(x) and 2*tanh(x); backward needs only output 0."""

    def forward(self, inputs):
        self.retain_outputs((0,))
        y = T.unary("tanh", inputs[0])
        return y, T.mul(y, T.scalar(2.0, y.dtype))

    def backward(self, indexes, grad_outputs):
        (y,) = self.get_retained_outputs()
        g0, g1 = grad_outputs
        return ((g0 + g1 * 2.0) * (1.0 - y * y),)


def test_kept_output_returns_same_node():
    x = Variable([0.2, 0.4])
    y = F.tanh(x)
    again = retrieve_retained_output(y.creator, 0)
    assert again.node is y.node
    assert y.creator.replay_count == 0


def test_dropped_output_is_replayed_with_identical_gradients():
    x0 = np.array([0.3, -1.2, 2.0])

    x = Variable(x0)
    y0, y1 = _TanhPair().apply((x,))
    fn = y1.creator
    F.sum(y1).backward()
    kept = x.grad.array.copy()
    assert fn.replay_count == 0
    del y0

    x = Variable(x0)
    y0, y1 = _TanhPair().apply((x,))
    fn = y1.creator
    del y0
    F.sum(y1).backward()
    assert fn.replay_count == 1
    assert np.array_equal(x.grad.array, kept)


def test_double_backprop_through_replayed_node():
    x0 = np.array([0.3, -1.2, 2.0])
    v = np.array([1.0, -0.5, 0.25])

    def grad_at(arr):
        x = Variable(arr)
        _, y1 = _TanhPair().apply((x,))
        (g,) = grad([F.sum(y1)], [x])
        return g.array

    x = Variable(x0)
    y0, y1 = _TanhPair().apply((x,))
    fn = y1.creator
    del y0
    (g,) = grad([F.sum(y1)], [x], enable_double_backprop=True)
    assert fn.replay_count == 1
    (hv,) = grad([F.sum(g * Variable(v, requires_grad=False))], [x])
    fd = (grad_at(x0 + 1e-6 * v) - grad_at(x0 - 1e-6 * v)) / 2e-6
    assert rel_err(hv.array, fd) <= 1e-6


# -- memory discipline


def test_cleargrad_returns_registry_to_baseline(collected):
    x = Variable([1.0, 2.0])
    base = T.registry.live_count
    F.sum(x * x).backward()
    x.cleargrad()
    gc.collect()
    assert T.registry.live_count == base
    x.cleargrad()
    assert T.registry.live_count == base


def test_dropped_input_buffer_is_reclaimed_while_backward_succeeds(collected):
    a = Variable([0.5, -0.5])
    x = a * 2.0
    buffer_id = x.data.buffer_id
    y = F.tanh(x)
    del x
    assert not T.registry.is_live(buffer_id)
    F.sum(y).backward()
    np.testing.assert_allclose(a.grad.array, 2 * (1 - np.tanh([1.0, -1.0]) ** 2), rtol=1e-14)


@pytest.mark.parametrize("double", [False, True])
def test_grad_then_drop_reclaims_everything_without_gc(double):
    gc.collect()
    base = T.registry.live_count
    gc.disable()
    try:
        x = Variable(np.linspace(-1, 1, 5))
        y = F.sum(F.tanh(F.exp(x) * x))
        (g,) = grad([y], [x], enable_double_backprop=double)
        if double:
            (h,) = grad([F.sum(g)], [x])
            del h
        del x, y, g
        assert T.registry.live_count == base
    finally:
        gc.enable()


def test_backward_then_drop_reclaims_everything_without_gc():
    gc.collect()
    base = T.registry.live_count
    gc.disable()
    try:
        x = Variable(np.linspace(-1, 1, 5))
        y = F.sum(F.tanh(x) * F.tanh(x))
        y.backward()
        x.cleargrad()
        del x, y
        assert T.registry.live_count == base
    finally:
        gc.enable()


def tanh_chain(length, x0):
    x = Variable(x0)
    h = x
    for _ in range(length):
        h = F.tanh(h)
    return x, F.sum(h)


def test_retained_outputs_released_one_per_node():
    gc.collect()
    x, loss = tanh_chain(64, np.linspace(-1, 1, 8))
    start = T.registry.tagged_live("retained_output")
    counts = []
    labels = []

    def hook(fn):
        labels.append(fn.label)
        counts.append(T.registry.tagged_live("retained_output"))

    loss.backward(hook=hook)
    assert labels == ["Sum"] + ["Tanh"] * 64
    tanh_counts = counts[1:]
    assert counts[0] == start
    assert [start - c for c in tanh_counts] == list(range(1, 65))


@pytest.mark.parametrize("length", [16, 33])
def test_gradient_liveness_bounded_on_chain(length):
    x, loss = tanh_chain(length, np.linspace(-1, 1, 8))
    T.registry.reset_peak()
    base = T.registry.tagged_live("grad")
    loss.backward()
    assert T.registry.tagged_peak("grad") - base <= 2


# -- fan-out against path enumeration


@st.composite
def random_dag(draw):
    n_ops = draw(st.integers(1, 5))
    ops = []
    for k in range(1, n_ops + 1):
        kind = draw(st.sampled_from(["scale", "tanh", "add", "mul"]))
        i = draw(st.integers(0, k - 1))
        j = draw(st.integers(0, k - 1))
        c = draw(st.floats(-2, 2, allow_nan=False))
        ops.append((kind, i, j, c))
    x0 = draw(st.floats(-1.5, 1.5, allow_nan=False))
    return x0, ops


def _dag_oracle(x0, ops):
    values = [x0]
    edges = [[]]  # edges[k] = list of (parent, local derivative)
    for kind, i, j, c in ops:
        vi, vj = values[i], values[j]
        if kind == "scale":
            values.append(c * vi)
            edges.append([(i, c)])
        elif kind == "tanh":
            t = float(np.tanh(vi))
            values.append(t)
            edges.append([(i, 1 - t * t)])
        elif kind == "add":
            values.append(vi + vj)
            edges.append([(i, 1.0), (j, 1.0)])
        else:
            values.append(vi * vj)
            edges.append([(i, vj), (j, vi)])

    def paths(k):
        if k == 0:
            return 1.0
        return sum(w * paths(p) for p, w in edges[k])

    return values[-1], paths(len(values) - 1)


@given(random_dag())
def test_fan_out_matches_path_enumeration(dag):
    x0, ops = dag
    x = Variable(x0)
    nodes = [x]
    for kind, i, j, c in ops:
        a, b = nodes[i], nodes[j]
        if kind == "scale":
            nodes.append(a * c)
        elif kind == "tanh":
            nodes.append(F.tanh(a))
        elif kind == "add":
            nodes.append(a + b)
        else:
            nodes.append(a * b)
    value, deriv = _dag_oracle(x0, ops)
    (g,) = grad([nodes[-1]], [x])
    assert nodes[-1].item() == pytest.approx(value, rel=1e-12, abs=1e-12)
    assert g.item() == pytest.approx(deriv, rel=1e-10, abs=1e-12)
