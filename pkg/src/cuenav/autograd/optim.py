from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


class Adam:
    """Adam over a fixed parameter list.

    Only parameters with ``trainable=True`` are touched; frozen ones keep
    their values bit-for-bit even if a gradient was written into them.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [p.name or repr(p) for p in self.params if p.trainable and p.grad is None]
        if missing:
            raise RuntimeError(f"adam step with absent gradients for: {', '.join(missing[:5])}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        step_size = self.lr / corr1
        for p, m, v in zip(self.params, self._m, self._v):
            if not p.trainable:
                p.grad = None
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / corr2) + self.eps
            p.data -= (step_size * m / denom).astype(p.data.dtype, copy=False)
            p.grad = None


def adam_step(params: Iterable[Parameter], state: Adam | None = None, learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> Adam:
    """Functional wrapper: apply one Adam update and return the optimizer state."""
    if state is None:
        state = Adam(params, lr=learning_rate, betas=(beta1, beta2), eps=epsilon)
    state.step()
    return state
