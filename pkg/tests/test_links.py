import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import dbrun.links as L
from dbrun import tensor as T
from dbrun.autograd import Variable


class HandWrittenLinear(L.Link):
    """Linear layer written the way a user would write it."""

    def __init__(self, n_in, n_out):
        super().__init__()
        with self.init_scope():
            self.W = L.Parameter(L.HeNormal(), (n_out, n_in))
            self.b = L.Parameter(0, (n_out,))

    def forward(self, x):
        return x @ self.W.T + self.b


def test_registration_inside_scope():
    link = HandWrittenLinear(3, 2)
    assert [p for p, _ in link.namedparams()] == ["/W", "/b"]
    assert link(Variable(np.zeros((1, 3)))).shape == (1, 2)


def test_duplicate_name_is_rejected():
    link = L.Link()
    with link.init_scope():
        link.W = L.Parameter(0, (2,))
        with pytest.raises(ValueError):
            link.W = L.Parameter(0, (2,))


def test_assignment_outside_scope_is_not_registered():
    link = L.Link()
    link.W = L.Parameter(0, (2,))
    assert list(link.namedparams()) == []


def test_plain_link_refuses_children():
    link = L.Link()
    with link.init_scope():
        with pytest.raises(TypeError):
            link.child = L.Linear(1, 1)


def test_shared_child_is_rejected():
    shared = L.Linear(2, 2)
    a, b = L.Chain(), L.Chain()
    with a.init_scope():
        a.l = shared
    with b.init_scope():
        with pytest.raises(ValueError):
            b.l = shared


def test_he_normal_std_and_zero_bias():
    L.seed(0)
    # a (25000, 4) weight gives 10^5 draws with n_in=4
    draws = L.Linear(4, 25000).W.array.ravel()
    assert draws.size == 100_000
    assert abs(draws.std() / np.sqrt(2 / 4) - 1) < 0.05
    assert np.all(L.Linear(4, 3).b.array == 0)


def test_he_normal_reproducible_given_seed():
    L.seed(7)
    a = L.Linear(3, 3).W.array.copy()
    L.seed(7)
    assert np.array_equal(L.Linear(3, 3).W.array, a)
    m1, m2 = L.MLP(3, 4, 2), L.MLP(3, 4, 2)
    m1.init_params(5)
    m2.init_params(5)
    assert L.checksum(m1) == L.checksum(m2)
    m2.init_params(6)
    assert L.checksum(m1) != L.checksum(m2)


def test_linear_rejects_empty_layers():
    with pytest.raises(ValueError):
        L.Linear(0, 2)


def test_mlp_paths_and_order():
    m = L.MLP(3, 4, 2)
    assert len(list(m.params())) == 4
    assert [p for p, _ in L.namedparams(m)] == ["/l1/W", "/l1/b", "/l2/W", "/l2/b"]
    assert len(list(m.l1.params())) == 2
    assert list(L.Chain().namedparams()) == []


def test_mlp_forward_of_zeros_is_output_bias():
    m = L.MLP(3, 4, 2)
    m.l2.b.data.assign([0.5, -1.5])
    out = m(Variable(np.zeros((2, 3))))
    assert out.array.tolist() == [[0.5, -1.5], [0.5, -1.5]]


def test_save_load_bit_exact():
    src, dst = L.MLP(3, 4, 2), L.MLP(3, 4, 2)
    src.init_params(1)
    dst.init_params(2)
    buf = io.BytesIO()
    L.save(src, buf)
    buf.seek(0)
    L.load(dst, buf)
    for (pa, a), (pb, b) in zip(src.namedparams(), dst.namedparams()):
        assert pa == pb and a.array.tobytes() == b.array.tobytes()


def test_load_missing_path():
    buf = io.BytesIO()
    L.save(L.Linear(3, 2), buf)
    buf.seek(0)
    with pytest.raises(KeyError):
        L.load(L.MLP(3, 2, 2), buf)


def test_load_transposed_shape():
    buf = io.BytesIO()
    T.write_snapshot(buf, [("/W", np.zeros((3, 2))), ("/b", np.zeros(2))])
    buf.seek(0)
    with pytest.raises(T.ShapeError):
        L.load(L.Linear(3, 2), buf)


# random trees of depth <= 4: the traversal must find exactly the declared parameters

trees = st.recursive(
    st.integers(0, 3).map(lambda n: ("leaf", n)),
    lambda kids: st.tuples(st.integers(0, 2), st.lists(kids, max_size=3)).map(lambda t: ("chain",) + t),
    max_leaves=10,
)


def build(spec, path, declared):
    if spec[0] == "leaf":
        link = L.Link()
        n = spec[1]
        kids = []
    else:
        link = L.Chain()
        n, kids = spec[1], spec[2]
    with link.init_scope():
        for i in range(n):
            setattr(link, f"p{i}", L.Parameter(0, (1,)))
            declared.add(f"{path}/p{i}")
        for j, kid in enumerate(kids):
            setattr(link, f"c{j}", build(kid, f"{path}/c{j}", declared))
    return link


def depth(spec):
    return 1 if spec[0] == "leaf" else 1 + max((depth(k) for k in spec[2]), default=0)


@given(trees)
def test_traversal_completeness(spec):
    if depth(spec) > 4:
        return
    declared = set()
    root = build(spec, "", declared)
    paths = [p for p, _ in root.namedparams()]
    assert len(paths) == len(set(paths))
    assert set(paths) == declared
    assert paths == [p for p, _ in root.namedparams()]


def test_model_tree_is_freed_without_cycle_collection():
    import gc

    gc.collect()
    base = T.registry.live_count
    gc.disable()
    try:
        model = L.MLP(3, 4, 2)
        assert T.registry.live_count == base + 4
        del model
        assert T.registry.live_count == base
    finally:
        gc.enable()


def test_child_of_a_dead_chain_can_be_registered_again():
    child = L.Linear(2, 2)
    first = L.Chain()
    with first.init_scope():
        first.l = child
    del first
    second = L.Chain()
    with second.init_scope():
        second.l = child
    assert [p for p, _ in second.namedparams()] == ["/l/W", "/l/b"]
