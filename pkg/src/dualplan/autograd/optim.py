from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import FrozenParameterError, OptimizerError


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None


class Adam:
    """Adam with bias correction; moment state keyed by parameter identity."""

    def __init__(self, params, lr: float = 1e-3, hyper: AdamConfig | None = None):
        self.params = list(params)
        self.lr = lr
        self.hyper = hyper or AdamConfig()
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        h = self.hyper
        for p in self.params:
            if p.frozen:
                raise FrozenParameterError(f"optimizer asked to update frozen parameter {p.name}")
            if p.grad is None:
                raise OptimizerError(f"missing gradient for parameter {p.name or '<unnamed>'}")
        scale = 1.0
        if h.clip_norm is not None:
            total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params)))
            if total > h.clip_norm:
                scale = h.clip_norm / total
        self.t += 1
        bc1 = 1.0 - h.beta1 ** self.t
        bc2 = 1.0 - h.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad * scale if scale != 1.0 else p.grad
            if h.weight_decay:
                g = g + h.weight_decay * p.data
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * (g * g)
            upd = (self.lr / bc1) * m / (np.sqrt(v / bc2) + h.eps)
            p.data = (p.data - upd).astype(p.data.dtype, copy=False)

    def fill_missing_grads(self) -> None:
        """Give zero gradients to parameters the current batch did not touch."""
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def sgd_adam_step(params, lr: float, hyper: AdamConfig | None = None, state: Adam | None = None) -> Adam:
    """One Adam update over ``params``; pass the returned state back in to continue."""
    if state is None:
        state = Adam(params, lr, hyper)
    state.lr = lr
    state.step()
    return state
