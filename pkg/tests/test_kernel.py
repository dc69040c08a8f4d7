import uuid

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dbrun import kernel as K
from dbrun import tensor as T
from dbrun.kernel.parser import Assign, BinOp, Call, Name, Neg, Num


def fresh_name():
    return "k_" + uuid.uuid4().hex[:8]


# -- signatures


def test_signature_concrete_types():
    decls = K.parse_signature("float32 x, float32 y")
    assert [(d.type_spec, d.name) for d in decls] == [("float32", "x"), ("float32", "y")]
    assert not any(d.is_generic for d in decls)


def test_signature_generic():
    decls = K.parse_signature("T x, T y")
    assert [d.type_spec for d in decls] == ["T", "T"]
    assert all(d.is_generic for d in decls)


@pytest.mark.parametrize(
    "text", ["float32 x float32 y", "int32 x", "float32", "T x, T x", "float32 x,", "TT x"]
)
def test_signature_errors(text):
    with pytest.raises(K.KernelSyntaxError):
        K.parse_signature(text)


# -- bodies


def test_parse_multiply_add_body():
    ast = K.parse_expr("w = x * y + z")
    assert ast == Assign("w", BinOp("+", BinOp("*", Name("x"), Name("y")), Name("z")))


def test_parse_negation():
    assert K.parse_expr("w = -x") == Assign("w", Neg(Name("x")))


def test_parse_error_points_at_offending_token():
    with pytest.raises(K.KernelSyntaxError) as info:
        K.parse_expr("w = x + * y")
    assert info.value.offset == 8


@pytest.mark.parametrize(
    "text",
    ["w = ", "w x + y", "w = x +", "w = (x + y", "w = foo(x)", "w = exp(x, y)", "w = x; v = y", "w = x $ y"],
)
def test_parse_errors(text):
    with pytest.raises(K.KernelSyntaxError):
        K.parse_expr(text)


def test_precedence_and_calls():
    ast = K.parse_expr("w = max(x, 0) - 2 * -y / 3;")
    assert K.to_source(ast) == "w = (max(x, 0.0) - ((2.0 * -y) / 3.0))"


names = st.sampled_from(["x", "y", "z", "a1", "_b"])
numbers = st.floats(0, 1e6, allow_nan=False).map(lambda v: Num(float(v)))
leaves = st.one_of(names.map(Name), numbers)


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/"), children, children).map(lambda t: BinOp(*t)),
        st.tuples(st.sampled_from(["abs", "exp", "log", "tanh"]), children).map(lambda t: Call(t[0], (t[1],))),
        st.tuples(st.sampled_from(["min", "max"]), children, children).map(lambda t: Call(t[0], (t[1], t[2]))),
    )


exprs = st.recursive(leaves, _extend, max_leaves=12)


@given(exprs)
def test_pretty_print_round_trip(expr):
    ast = Assign("w", expr)
    assert K.parse_expr(K.to_source(ast)) == ast


# -- elementwise kernels


def my_mad():
    return K.compile_elementwise("float32 x, float32 y, float32 z", "float32 w", "w = x * y + z", "my_mad")


def test_my_mad_scalar():
    w = my_mad()(np.float32(2), np.float32(3), np.float32(4))
    assert w.dtype == T.F32
    assert w.item() == 10.0


def test_my_mad_arrays_vs_scalar_loop():
    x, y, z = (np.array(v, dtype=np.float32) for v in ([1, 2], [3, 4], [5, 6]))
    expected = [float(np.float32(a) * np.float32(b) + np.float32(c)) for a, b, c in zip(x, y, z)]
    assert expected == [8.0, 14.0]
    assert my_mad()(x, y, z).numpy().tolist() == expected


def test_compile_twice_is_one_entry_one_hit():
    name = fresh_name()
    entries = len(K.kernel_cache)
    hits = K.kernel_cache.stats.hits
    k1 = K.compile_elementwise("float64 a", "float64 b", "b = a + 1", name)
    k2 = K.compile_elementwise("float64 a", "float64 b", "b = a + 1", name)
    assert k1 is k2
    assert len(K.kernel_cache) == entries + 1
    assert K.kernel_cache.stats.hits == hits + 1


def test_generic_resolution():
    k = K.compile_elementwise("T x, T y", "T z", "z = x + y", fresh_name())
    assert k.resolve([np.float64, np.float64]).output_dtype == T.F64
    assert k.resolve([np.float32, np.float32]).output_dtype == T.F32
    with pytest.raises(K.BindingError):
        k.resolve([np.float32, np.float64])
    with pytest.raises(K.BindingError):
        k(np.ones(2, np.float32), np.ones(2))


def test_resolve_twice_hits_cache():
    k = K.compile_elementwise("T x", "T y", "y = x * 2", fresh_name())
    k.resolve([np.float64])
    hits = K.specialization_cache.stats.hits
    assert k.resolve([np.float64]) is k.resolve([np.float64])
    assert K.specialization_cache.stats.hits == hits + 2


def test_concrete_parameters_cast_inputs():
    k = K.compile_elementwise("float32 x", "float64 y", "y = x", fresh_name())
    out = k(np.array([0.1]))
    assert out.dtype == T.F64
    assert out.numpy()[0] == float(np.float32(0.1))


def test_division_by_zero_is_ieee():
    k = K.compile_elementwise("T x, T y", "T z", "z = x / y", fresh_name())
    out = k(np.array([1.0, -1.0, 0.0]), np.zeros(3)).numpy()
    assert out[0] == np.inf and out[1] == -np.inf and np.isnan(out[2])


@pytest.mark.parametrize(
    "in_sig,out_sig,body",
    [
        ("float64 x", "float64 y", "z = x"),  # target is not an output
        ("float64 x", "float64 y", "x = y"),  # assigns to an input
        ("float64 x", "float64 y", "y = q"),  # unresolved identifier
        ("float64 x", "float64 y", "y = y + x"),  # output read before assignment
        ("float64 x", "T y", "y = x"),  # unbound output type
        ("float64 x", "float64 x", "x = 1"),  # name clash
        ("float64 x", "float64 y, float64 z", "y = x"),  # two outputs
    ],
)
def test_compile_errors(in_sig, out_sig, body):
    with pytest.raises(K.KernelCompileError):
        K.compile_elementwise(in_sig, out_sig, body, fresh_name())


def test_rejects_integer_arrays():
    k = K.compile_elementwise("T x", "T y", "y = x", fresh_name())
    with pytest.raises(TypeError):
        k(np.arange(3))


@st.composite
def broadcast_shapes(draw):
    base = draw(st.lists(st.integers(1, 4), min_size=0, max_size=3))
    a = [d if draw(st.booleans()) else 1 for d in base]
    b = [d if draw(st.booleans()) else 1 for d in base]
    drop = draw(st.integers(0, len(b)))
    return tuple(a), tuple(b[drop:])


@given(broadcast_shapes(), st.integers(0, 2**32 - 1))
def test_add_kernel_matches_tensor_add_bitwise(shapes, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=shapes[0]), rng.normal(size=shapes[1])
    k = K.compile_elementwise("T x, T y", "T z", "z = x + y", "add_eq")
    out = k(a, b).numpy()
    ref = T.add(T.as_tensor(a), T.as_tensor(b)).numpy()
    assert out.shape == ref.shape
    assert np.array_equal(out, ref)


def test_evaluation_is_deterministic():
    k = K.compile_elementwise("T x", "T y", "y = tanh(x) * exp(-abs(x)) + log(1 + x * x)", fresh_name())
    x = np.random.default_rng(3).normal(size=(5, 4))
    assert np.array_equal(k(x).numpy(), k(x).numpy())


# -- reductions


def test_sum_fold():
    k = K.compile_reduction("T x", "T v", "v = x", "+", name=fresh_name())
    assert k(np.array([1.0, 2.0, 3.0])).item() == 6.0


def test_sum_fold_empty_is_identity():
    k = K.compile_reduction("T x", "T v", "v = x", "+", name=fresh_name())
    assert k(np.zeros(0)).item() == 0.0


def test_sum_of_squares_vs_loop():
    k = K.compile_reduction("T x", "T v", "v = x * x", "+", name=fresh_name())
    xs = [1.0, 2.0, 3.0]
    assert sum(v * v for v in xs) == 14.0
    assert k(np.array(xs)).item() == 14.0


def test_max_fold_over_axis():
    k = K.compile_reduction("T x", "T v", "v = abs(x)", "max", name=fresh_name())
    out = k(np.array([[1.0, -5.0], [-7.0, 2.0]]), axis=0)
    assert out.numpy().tolist() == [7.0, 5.0]
    assert k(np.zeros((0, 2)), axis=0).numpy().tolist() == [-np.inf, -np.inf]


def test_fold_identity_must_match():
    with pytest.raises(K.KernelCompileError):
        K.compile_reduction("T x", "T v", "v = x", "+", identity=1.0, name=fresh_name())
    with pytest.raises(K.KernelCompileError):
        K.compile_reduction("T x", "T v", "v = x", "*", name=fresh_name())
