from __future__ import annotations

import numpy as np

from .tensor import Graph, Tensor


def grad_check(f, x: Tensor, eps: float = 1e-5, indices=None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps ``x`` to a 1-element tensor and may close over other state;
    ``x.data`` is perturbed in place and restored.  ``indices`` limits the
    comparison to a subset of flat positions (large parameter tensors).
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Graph() as g:
        y = f(x)
    g.backward(y)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.requires_grad = was

    flat = x.data.reshape(-1)
    idx = range(x.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        up = flat[i]
        hi = f(x).item()
        flat[i] = orig - eps
        down = flat[i]
        lo = f(x).item()
        flat[i] = orig
        # divide by the step that was actually representable
        num = (hi - lo) / (up - down)
        a = analytic[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
