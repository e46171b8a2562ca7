"""Adam with bias correction."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError(f"Adam was given a tensor that does not require grad: {p!r}")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self)


def adam_step(opt: Adam) -> None:
    """One in-place Adam update of every parameter held by ``opt``."""
    for p in opt.params:
        if p.grad is None:
            raise ValueError(f"parameter {p!r} has no gradient")
    b1, b2 = opt.betas
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(opt.params, opt._m, opt._v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(p.dtype, copy=False)
