"""Adam optimiser over a flat list of parameter tensors."""

from __future__ import annotations

import numpy as np

from ..errors import InputError
from .tensor import Tensor


class Adam:
    """Adam with bias-corrected first and second moments.

    Moment buffers are float32 like the parameters; the per-step update
    is ``lr * m_hat / (sqrt(v_hat) + eps)``.  Parameters whose gradient
    is unset at ``step()`` are left untouched.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not params:
            raise InputError("Adam needs at least one parameter")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise InputError("Adam betas must be in [0, 1)")
        if lr < 0.0 or eps <= 0.0:
            raise InputError("Adam needs lr >= 0 and eps > 0")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(np.float32)
