"""Dense float64 tensors with a tape-based reverse-mode engine.

Operations executed while a :class:`Graph` is active are appended to that
graph in execution order; :meth:`Graph.backward` walks the tape in exact
reverse.  Outside a graph the same functions run as plain numpy math and
record nothing, which is what inference uses.
"""

from __future__ import annotations

import weakref

import numpy as np


class ShapeMismatch(ValueError):
    pass


class DetachedTensor(RuntimeError):
    pass


_ACTIVE: list["Graph"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_graph")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._graph = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, kept deliberately small
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Graph:
    """Execution tape.  Use as a context manager around the forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def current_graph():
    return _ACTIVE[-1] if _ACTIVE else None


def _record(data, inputs, backward_fn) -> Tensor:
    graph = current_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._graph = weakref.ref(graph)   # no tensor -> tape cycle
        graph.nodes.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor, graph: Graph) -> None:
    if loss.size != 1:
        raise ShapeMismatch(f"backward needs a 1-element loss, got shape {loss.shape}")
    if loss._graph is None or loss._graph() is not graph:
        raise DetachedTensor("loss was not produced by this graph")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(graph.nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
            else:
                t.grad += g


def zero_grad(params) -> None:
    for p in _iter_params(params):
        p.grad = np.zeros_like(p.data)


def _iter_params(params):
    if isinstance(params, dict):
        return params.values()
    if isinstance(params, Tensor):
        return (params,)
    return params


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _record(a.data * b.data, (a, b), bw)


def scalar_mul(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def straight_through(hard, soft) -> Tensor:
    """Forward value ``hard``, gradient routed to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeMismatch(f"straight_through: {hard.shape} vs {soft.shape}")
    return _record(hard.copy(), (soft,), lambda g: (g,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``; ``W`` is (in, out)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    inputs = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeMismatch(f"linear: bias {b.shape} vs weight {W.shape}")
        out = out + b.data
        inputs.append(b)

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        grads = [
            (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None,
            x2.T @ g2 if W.requires_grad else None,
        ]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return grads

    return _record(out.reshape(*lead, W.shape[1]), tuple(inputs), bw)


# ---------------------------------------------------------------- shape

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat: shapes " + ", ".join(str(t.shape) for t in ts)) from None
    ax = axis % out.ndim
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record(out, tuple(ts), bw)


def index(a, key) -> Tensor:
    """``a[key]`` for basic slices or integer-array gathers."""
    a = as_tensor(a)
    out = a.data[key]
    advanced = _is_advanced(key)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    return _record(np.array(out, copy=True), (a,), bw)


def _is_advanced(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in parts)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------- normalisers

def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), bw)


def layer_norm(a, axis=-1, eps=1e-5) -> Tensor:
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record(y, (a,), bw)


def l2_normalize(a, axis=-1, eps=1e-12) -> Tensor:
    """Unit-norm rows; all-zero rows stay zero."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    d = np.maximum(n, eps)
    y = a.data / d

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return ((g - np.where(n > eps, y * proj, 0.0)) / d,)

    return _record(y, (a,), bw)


# ---------------------------------------------------------------- spatial

def bilinear_sample(grid, xy) -> Tensor:
    """Sample ``grid`` [(B,) H, W, C] at ``xy`` [(B,) M, 2] in cell-index units.

    ``xy[..., 0]`` runs along W, ``xy[..., 1]`` along H.  Coordinates are
    clamped to the grid (border padding); clamped axes get zero gradient.
    """
    grid, xy = as_tensor(grid), as_tensor(xy)
    batched = grid.data.ndim == 4
    G = grid.data if batched else grid.data[None]
    P = xy.data if batched else xy.data[None]
    if G.ndim != 4 or P.ndim != 3 or P.shape[-1] != 2 or P.shape[0] != G.shape[0]:
        raise ShapeMismatch(f"bilinear_sample: grid {grid.shape} vs xy {xy.shape}")
    B, H, W, C = G.shape
    u = np.clip(P[..., 0], 0.0, W - 1)
    v = np.clip(P[..., 1], 0.0, H - 1)
    inside_u = (P[..., 0] > 0) & (P[..., 0] < W - 1)
    inside_v = (P[..., 1] > 0) & (P[..., 1] < H - 1)
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    bi = np.arange(B)[:, None]
    g00, g01 = G[bi, v0, u0], G[bi, v0, u1]
    g10, g11 = G[bi, v1, u0], G[bi, v1, u1]
    top = g00 + fu * (g01 - g00)
    bot = g10 + fu * (g11 - g10)
    out = top + fv * (bot - top)
    if not batched:
        out = out[0]

    def bw(g):
        gb = g if batched else g[None]
        ggrid = gxy = None
        if grid.requires_grad:
            acc = np.zeros_like(G)
            bb = np.broadcast_to(bi, u0.shape)
            np.add.at(acc, (bb, v0, u0), gb * (1 - fu) * (1 - fv))
            np.add.at(acc, (bb, v0, u1), gb * fu * (1 - fv))
            np.add.at(acc, (bb, v1, u0), gb * (1 - fu) * fv)
            np.add.at(acc, (bb, v1, u1), gb * fu * fv)
            ggrid = acc if batched else acc[0]
        if xy.requires_grad:
            du = ((1 - fv) * (g01 - g00) + fv * (g11 - g10)) * gb
            dv = (bot - top) * gb
            gxy = np.stack([du.sum(-1) * inside_u, dv.sum(-1) * inside_v], axis=-1)
            if not batched:
                gxy = gxy[0]
        return ggrid, gxy

    return _record(out, (grid, xy), bw)


def avg_pool2x2(a) -> Tensor:
    """Mean over non-overlapping 2x2 windows of a [..., H, W, C] grid."""
    a = as_tensor(a)
    *lead, H, W, C = a.shape
    if H % 2 or W % 2:
        raise ShapeMismatch(f"avg_pool2x2: odd spatial extent {a.shape}")
    out = a.data.reshape(*lead, H // 2, 2, W // 2, 2, C).mean(axis=(-4, -2))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2)
        return (g * 0.25,)

    return _record(out, (a,), bw)
