"""Parameter update rules: plain gradient descent and adaptive moments
with decoupled weight decay.

Weight decay is always decoupled: it is subtracted from the parameters
directly and never folded into the gradient statistics.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor

__all__ = ["MissingGradientError", "PlainSGD", "AdamW", "make_optimizer"]


class MissingGradientError(RuntimeError):
    pass


def _require_grads(params: list[Tensor]) -> None:
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradientError(
                f"optimizer: parameter {i} (shape {p.shape}) has no gradient"
            )
        if p.grad.shape != p.data.shape:
            raise MissingGradientError(
                f"optimizer: gradient shape {p.grad.shape} does not match "
                f"parameter shape {p.data.shape}"
            )


def _check_update(p: Tensor) -> None:
    if p.data.size and not np.isfinite(p.data.sum()):
        raise NonFiniteError("optimizer: non-finite parameter after update")


class PlainSGD:
    """p <- p - lr * grad - lr * wd * p"""

    kind = "sgd"

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        _require_grads(self.params)
        self.step_count += 1
        lr, wd = self.lr, self.weight_decay
        for p in self.params:
            update = lr * p.grad
            if wd:
                update = update + lr * wd * p.data
            p.data = p.data - update
            _check_update(p)


class AdamW:
    """Adaptive-moment estimation with bias correction and decoupled decay."""

    kind = "adamw"

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        _require_grads(self.params)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * (g * g)
            m_hat = self._m[i] / corr1
            v_hat = self._v[i] / corr2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data = p.data - update
            _check_update(p)


def make_optimizer(kind: str, params: list[Tensor], lr: float,
                   weight_decay: float = 0.0) -> PlainSGD | AdamW:
    if kind == "sgd":
        return PlainSGD(params, lr, weight_decay)
    if kind == "adamw":
        return AdamW(params, lr, weight_decay)
    raise ValueError(f"optimizer: unknown kind {kind!r}")
