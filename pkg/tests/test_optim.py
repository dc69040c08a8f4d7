import numpy as np
import pytest

import dbrun.functions as F
import dbrun.links as L
from dbrun import optim
from dbrun.autograd import Variable


class Scalar(L.Link):
    def __init__(self, w=1.0):
        super().__init__()
        with self.init_scope():
            self.w = L.Parameter(np.array([w]))


def step(opt, model, g):
    model.w.grad = Variable(np.array([g]))
    opt.update()
    return model.w.array[0]


def adam_scalar(w, grads, alpha=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float Adam recurrence."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - alpha * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return w


def test_sgd_step():
    model = Scalar()
    opt = optim.create("sgd", lr=0.1).setup(model)
    assert step(opt, model, 2.0) == pytest.approx(0.8, abs=1e-15)
    assert opt.state == {"/w": {}}


def test_momentum_two_steps():
    model = Scalar()
    opt = optim.create("momentum_sgd", lr=0.1, momentum=0.9).setup(model)
    assert step(opt, model, 1.0) == pytest.approx(0.9, abs=1e-15)
    # [DERIVED] v = 0.9*1 + 1 = 1.9; w = 0.9 - 0.19
    assert step(opt, model, 1.0) == pytest.approx(0.71, abs=1e-15)


def test_adam_first_step():
    model = Scalar()
    opt = optim.create("adam").setup(model)
    w = step(opt, model, 1.0)
    assert adam_scalar(1.0, [1.0]) == pytest.approx(1 - 1e-3 / (1 + 1e-8), abs=1e-15)
    assert w == pytest.approx(1 - 1e-3 / (1 + 1e-8), abs=1e-15)
    assert len(opt.state["/w"]) == 2


def test_adam_matches_scalar_recurrence():
    grads = [0.3, -1.2, 2.0, 0.01, -0.5]
    model = Scalar(0.7)
    opt = optim.create("adam", alpha=0.01).setup(model)
    for g in grads:
        w = step(opt, model, g)
    assert w == pytest.approx(adam_scalar(0.7, grads, alpha=0.01), rel=1e-14)


def test_slots_lazy_and_setup_resets():
    model = L.MLP(2, 3, 2)
    opt = optim.create("adam").setup(model)
    assert opt.state == {} and opt.t == 0
    for p in model.params():
        p.grad = Variable(np.ones(p.shape))
    opt.update()
    opt.update()
    assert opt.t == 2
    assert all(len(s) == 2 for s in opt.state.values())
    opt.setup(model)
    assert opt.t == 0 and opt.state == {}


def test_grads_untouched_by_update():
    model = Scalar()
    opt = optim.create("sgd", lr=0.1).setup(model)
    step(opt, model, 2.0)
    assert model.w.grad.array[0] == 2.0


def test_missing_grad_names_path():
    model = L.MLP(2, 3, 2)
    opt = optim.create("sgd").setup(model)
    for path, p in model.namedparams():
        if path != "/l2/b":
            p.grad = Variable(np.ones(p.shape))
    with pytest.raises(optim.MissingGradError, match="/l2/b"):
        opt.update()
    assert opt.t == 0


def test_unknown_rule():
    with pytest.raises(ValueError):
        optim.create("rmsprop")


def test_sgd_step_vs_loop_oracle():
    model = L.MLP(3, 4, 2)
    model.init_params(0)
    before = {p: v.array.copy() for p, v in model.namedparams()}
    rng = np.random.default_rng(0)
    for p in model.params():
        p.grad = Variable(rng.normal(size=p.shape))
    optim.create("sgd", lr=0.05).setup(model).update()
    for path, p in model.namedparams():
        w0, g = before[path].ravel(), p.grad.array.ravel()
        expected = [w0[i] - 0.05 * g[i] for i in range(w0.size)]
        assert p.array.ravel().tolist() == expected


def test_quadratic_loss_decreases_monotonically():
    rng = np.random.default_rng(0)
    x = Variable(rng.normal(size=(8, 3)))
    y = Variable(rng.normal(size=(8, 2)))
    model = L.Linear(3, 2, nobias=True)
    model.init_params(0)
    opt = optim.create("sgd", lr=1e-2).setup(model)
    losses = []
    for _ in range(100):
        model.cleargrads()
        diff = model(x) - y
        loss = F.sum(diff * diff)
        loss.backward()
        opt.update()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))
