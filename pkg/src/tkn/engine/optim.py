"""Adam optimizer over named parameter lists.

Updates are performed in place on leaf tensors, outside any tape, in the
fixed order the parameters were registered — one ingredient of bitwise
training reproducibility.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class FrozenParameterError(RuntimeError):
    """Raised when an update targets a parameter marked non-trainable."""


class Adam:
    def __init__(self, named_params, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self._items: list[tuple[str, Tensor]] = list(named_params)
        for name, p in self._items:
            if not p.requires_grad:
                raise FrozenParameterError(f"parameter {name!r} is frozen")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros_like(p.data) for _, p in self._items]
        self._v = [np.zeros_like(p.data) for _, p in self._items]
        self._t = 0

    def zero_grad(self) -> None:
        for _, p in self._items:
            p.grad = None

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self._t
        bias2 = 1.0 - b2**self._t
        for (name, p), m, v in zip(self._items, self._m, self._v):
            if not p.requires_grad:
                raise FrozenParameterError(f"parameter {name!r} was frozen mid-training")
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
