"""Loss primitives for the composite tracking objective."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeMismatch, _record, as_tensor


class NonPositiveDelta(ValueError):
    pass


class TrajectoryTooShort(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


def huber(residual, delta: float):
    """Summed Huber penalty: 0.5 r^2 inside |r| <= delta, linear outside."""
    if not delta > 0:
        raise NonPositiveDelta(f"huber delta must be positive, got {delta}")
    r = as_tensor(residual)
    a = np.abs(r.data)
    quad = a <= delta
    val = np.where(quad, 0.5 * r.data * r.data, delta * (a - 0.5 * delta)).sum()

    def bw(g):
        return (g * np.clip(r.data, -delta, delta),)

    return _record(np.asarray(val), (r,), bw)


def second_diff_l1(traj):
    """Sum over interior frames of the L1 norm of p[t+1] - 2 p[t] + p[t-1].

    Extra middle axes (several points) are summed as independent trajectories.
    """
    p = as_tensor(traj)
    if p.data.ndim < 2 or p.shape[-1] != 2:
        raise ShapeMismatch(f"second_diff_l1 expects [T x 2] (or [T x ... x 2]), got {p.shape}")
    if p.shape[0] < 3:
        raise TrajectoryTooShort(f"need at least 3 frames, got {p.shape[0]}")
    d = p.data[2:] - 2.0 * p.data[1:-1] + p.data[:-2]
    val = np.abs(d).sum()

    def bw(g):
        s = np.sign(d) * g
        out = np.zeros_like(p.data)
        out[2:] += s
        out[1:-1] -= 2.0 * s
        out[:-2] += s
        return (out,)

    return _record(np.asarray(val), (p,), bw)


def cross_entropy(logits, targets):
    """Mean over N columns of -log softmax(logits[:, n])[targets[n]].

    ``logits`` is class-major, [C x N].
    """
    z = as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    if z.data.ndim != 2 or z.shape[1] != t.size:
        raise ShapeMismatch(f"cross_entropy: logits {z.shape} vs targets ({t.size},)")
    C, N = z.shape
    if N == 0:
        raise ShapeMismatch("cross_entropy: no targets")
    if np.any(t < 0) or np.any(t >= C):
        raise IndexOutOfRange(f"target outside [0, {C}): {t.tolist()}")
    m = z.data.max(axis=0, keepdims=True)
    e = np.exp(z.data - m)
    s = e.sum(axis=0, keepdims=True)
    logp = z.data - m - np.log(s)
    cols = np.arange(N)
    val = -logp[t, cols].mean()

    def bw(g):
        p = e / s
        p[t, cols] -= 1.0
        return (p * (g / N),)

    return _record(np.asarray(val), (z,), bw)
