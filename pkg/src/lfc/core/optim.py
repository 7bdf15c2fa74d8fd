"""Adam with bias correction."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Apply one Adam update to every parameter, then zero its gradient."""
    for p in params:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        if lr != 0.0:
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
