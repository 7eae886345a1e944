"""First-order optimisers updating :class:`Tensor` parameters in place."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from src.autodiff import Tensor
from src.models import Schedule


class Optimizer:
    """Shared bookkeeping: the parameter list, L2 weight decay and zeroing."""

    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.0) -> None:
        self.params: List[Tensor] = list(params)
        if not self.params:
            raise ValueError("optimizer received no parameters")
        self.weight_decay = weight_decay

    def _gradient(self, p: Tensor) -> np.ndarray:
        grad = p.grad
        if self.weight_decay:
            grad = grad + self.weight_decay * p.data
        return grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 5e-3) -> None:
        super().__init__(params, weight_decay)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.velocity[i] = self.momentum * self.velocity[i] + self._gradient(p)
            p.data -= (lr * self.velocity[i]).astype(p.data.dtype)


class Adam(Optimizer):
    def __init__(
        self,
        params: Sequence[Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        super().__init__(params, weight_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            grad = self._gradient(p)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (grad * grad)
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def build_optimizer(params: Sequence[Tensor], schedule: Schedule) -> Optimizer:
    if schedule.optimizer == "adam":
        return Adam(params, weight_decay=schedule.weight_decay)
    return SGD(params, momentum=schedule.momentum, weight_decay=schedule.weight_decay)
