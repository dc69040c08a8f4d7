"""Parameter update rules over a model's parameter tree."""

from __future__ import annotations

import numpy as np

from .links import Link


class MissingGradError(RuntimeError):
    pass


class Optimizer:
    """Base class; subclasses implement :meth:`update_one`.

    Per-parameter state is keyed by parameter path and allocated on the
    first update that touches the parameter.
    """

    target: Link | None = None

    def __init__(self):
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def setup(self, model: Link) -> "Optimizer":
        self.target = model
        self.t = 0
        self.state = {}
        return self

    def update(self) -> None:
        if self.target is None:
            raise RuntimeError("optimizer has no target; call setup(model) first")
        named = list(self.target.namedparams())
        for path, p in named:
            if p.grad is None:
                raise MissingGradError(f"parameter {path} has no gradient")
        self.t += 1
        for path, p in named:
            slots = self.state.setdefault(path, {})
            w = np.array(p.array)
            g = p.grad.array
            self.update_one(w, g, slots)
            p.data.assign(w)

    def update_one(self, w: np.ndarray, g: np.ndarray, slots: dict) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, lr: float = 0.01):
        super().__init__()
        self.lr = lr

    def update_one(self, w, g, slots):
        w -= self.lr * g


class MomentumSGD(Optimizer):
    """v <- momentum * v + g;  w <- w - lr * v."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.9):
        super().__init__()
        self.lr = lr
        self.momentum = momentum

    def update_one(self, w, g, slots):
        v = slots.get("v")
        if v is None:
            v = slots["v"] = np.zeros_like(w)
        v *= self.momentum
        v += g
        w -= self.lr * v


class Adam(Optimizer):
    """Adam with bias-corrected moment estimates."""

    def __init__(self, alpha: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__()
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def update_one(self, w, g, slots):
        if "m" not in slots:
            slots["m"] = np.zeros_like(w)
            slots["v"] = np.zeros_like(w)
        m, v = slots["m"], slots["v"]
        m += (1 - self.beta1) * (g - m)
        v += (1 - self.beta2) * (g * g - v)
        m_hat = m / (1 - self.beta1**self.t)
        v_hat = v / (1 - self.beta2**self.t)
        w -= self.alpha * m_hat / (np.sqrt(v_hat) + self.eps)


RULES = {"sgd": SGD, "momentum_sgd": MomentumSGD, "adam": Adam}


def create(rule: str, **hyperparams) -> Optimizer:
    try:
        cls = RULES[rule]
    except KeyError:
        raise ValueError(f"unknown optimizer {rule!r}; choose from {sorted(RULES)}") from None
    return cls(**hyperparams)
