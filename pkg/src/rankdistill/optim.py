"""Adam optimizer over autodiff leaf tensors."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    """Standard Adam with bias correction; gradients are cleared after each step."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"adam step with missing gradient on parameter {i}")
        self._t += 1
        bc1 = 1.0 - self.beta1**self._t
        bc2 = 1.0 - self.beta2**self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
