"""Minimal reverse-mode automatic differentiation over numpy arrays.

Define-by-run tape: every operation produces a ``Tensor`` holding the
forward value plus a closure that routes the output gradient to its
parents.  ``Tensor.backward()`` walks the graph in reverse topological
order.  Everything is float64; broadcasting follows numpy rules with
gradients summed back over broadcast axes.

The set of primitives is deliberately small: enough for tiny MLPs,
hash-grid encoders, volume rendering, and pose chains.  Each primitive
has a randomized finite-difference test.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor (scalar unless ``grad`` given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary(a, b, out_data, da, db) -> Tensor:
    """Build a binary op node; ``da``/``db`` map grad_out -> parent grad."""
    a, b = as_tensor(a), as_tensor(b)
    req = a.requires_grad or b.requires_grad
    if not req:
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(da(g), a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(db(g), b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def _unary(a, out_data, da) -> Tensor:
    a = as_tensor(a)
    if not a.requires_grad:
        return Tensor(out_data)

    def backward(g):
        a.accumulate(_unbroadcast(da(g), a.data.shape))

    return Tensor(out_data, True, (a,), backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(
        a,
        b,
        a.data / b.data,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def square(a):
    a = as_tensor(a)
    return _unary(a, a.data * a.data, lambda g: 2.0 * a.data * g)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _unary(a, out, lambda g: g * 0.5 / out)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, lambda g: g * out)


def log(a):
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def sin(a):
    a = as_tensor(a)
    return _unary(a, np.sin(a.data), lambda g: g * np.cos(a.data))


def cos(a):
    a = as_tensor(a)
    return _unary(a, np.cos(a.data), lambda g: -g * np.sin(a.data))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary(a, out, lambda g: g * (1.0 - out * out))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, out, lambda g: g * out * (1.0 - out))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), lambda g: g * mask)


def abs_(a):
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), lambda g: g * np.sign(a.data))


def clamp(a, lo: float, hi: float):
    """Clip to [lo, hi]; gradient passes inside the band and at its edges."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda g: g * mask)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def da(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def db(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return _binary(a, b, out, da, db)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def da(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.data.shape).copy()

    return _unary(a, out, da)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(a.data.shape))


def take(a, idx):
    """Gather ``a[idx]``; backward scatter-adds into the touched slots."""
    a = as_tensor(a)
    out = a.data[idx]

    def da(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return _unary(a, out, da)


def concatenate(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    if not req:
        return Tensor(out)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate(p)

    return Tensor(out, True, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    if not req:
        return Tensor(out)

    def backward(g):
        parts = np.split(g, len(tensors), axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate(np.squeeze(p, axis=axis))

    return Tensor(out, True, tuple(tensors), backward)


def where(cond: np.ndarray, a, b):
    """Select with a constant (non-differentiable) condition mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _binary(
        a,
        b,
        np.where(cond, a.data, b.data),
        lambda g: g * cond,
        lambda g: g * ~cond,
    )


def custom(parents, out_data, backward) -> Tensor:
    """Build a node with a hand-written backward.

    ``backward(grad_out)`` must call ``p.accumulate(...)`` on each parent
    that requires a gradient.
    """
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(out_data)
    return Tensor(out_data, True, parents, backward)


# -- small rigid-body helpers on tensors --------------------------------


def skew_batch(r: Tensor) -> Tensor:
    """(N, 3) rotation vectors to (N, 3, 3) cross-product matrices."""
    n = r.data.shape[0]
    data = np.zeros((n, 3, 3))
    rx, ry, rz = r.data[:, 0], r.data[:, 1], r.data[:, 2]
    data[:, 0, 1], data[:, 0, 2] = -rz, ry
    data[:, 1, 0], data[:, 1, 2] = rz, -rx
    data[:, 2, 0], data[:, 2, 1] = -ry, rx

    def backward(g):
        gr = np.stack(
            [
                g[:, 2, 1] - g[:, 1, 2],
                g[:, 0, 2] - g[:, 2, 0],
                g[:, 1, 0] - g[:, 0, 1],
            ],
            axis=1,
        )
        r.accumulate(gr)

    return custom((r,), data, backward)


def _sinc_coeffs(theta2: np.ndarray):
    """A = sin(t)/t, B = (1-cos(t))/t^2 and their d/d(theta2), series-safe."""
    t2 = theta2
    small = t2 < 1e-12
    t = np.sqrt(np.where(small, 1.0, t2))
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
        b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / t2)
        da = np.where(
            small, -1.0 / 6.0 + t2 / 60.0, (t * np.cos(t) - np.sin(t)) / (2.0 * t2 * t)
        )
        db = np.where(
            small,
            -1.0 / 24.0 + t2 / 360.0,
            (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / (2.0 * t2 * t2),
        )
    return a, b, da, db


def rotvec_to_matrix_batch(r: Tensor) -> Tensor:
    """Differentiable batched Rodrigues: (N, 3) -> (N, 3, 3)."""
    theta2 = sum_(square(r), axis=1)  # (N,)
    a_np, b_np, da_np, db_np = _sinc_coeffs(theta2.data)

    def coeff(val, dval):
        def backward(g):
            theta2.accumulate(g * dval)

        return custom((theta2,), val, backward)

    a = coeff(a_np, da_np)
    b = coeff(b_np, db_np)
    k = skew_batch(r)
    k2 = matmul(k, k)
    eye = Tensor(np.broadcast_to(np.eye(3), k.data.shape).copy())
    a3 = reshape(a, (-1, 1, 1))
    b3 = reshape(b, (-1, 1, 1))
    return add(eye, add(mul(a3, k), mul(b3, k2)))


def apply_rigid(rot: Tensor, trans: Tensor, points: Tensor) -> Tensor:
    """Batched R @ p + t: (N,3,3), (N,3), (N,3) -> (N,3)."""
    rotated = matmul(rot, reshape(points, (-1, 3, 1)))
    return add(reshape(rotated, (-1, 3)), trans)
