"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every ``Tensor`` wraps a float64 array. Operations record a closure that
accumulates gradients into their parents; ``Tensor.backward`` walks the
graph in reverse topological order. Nodes built only from constants do not
record anything, so the same code paths serve plain numpy evaluation.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make numpy defer to the reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) * grad into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a cotangent needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ValueError(f"cotangent shape {grad.shape} != output shape {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            if _is_basic_index(idx):
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), back)

    # shape ------------------------------------------------------------------

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(*axes), (self,), lambda g: (g.transpose(*inv),)
        )

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # elementwise ------------------------------------------------------------

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        out = sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def relu(self):
        pos = self.data > 0
        return Tensor._make(np.where(pos, self.data, 0.0), (self,), lambda g: (g * pos,))

    def abs(self):
        # subgradient 0 at 0
        sgn = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * sgn,))

    def matmul(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(
            x @ y,
            (self, other),
            lambda g: (
                _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape),
                _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape),
            ),
        )

    __matmul__ = matmul


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # two branches keep exp() from overflowing
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    return where(a.data >= b.data, a, b)


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    return where(a.data <= b.data, a, b)


def wrap01(x):
    """``x mod 1`` mapped into [0, 1); derivative 1 everywhere it is defined."""
    x = as_tensor(x)
    out = np.mod(x.data, 1.0)
    out = np.where(out >= 1.0, 0.0, out)
    return Tensor._make(out, (x,), lambda g: (g,))


def mod(x, m):
    x = as_tensor(x)
    return Tensor._make(np.mod(x.data, m), (x,), lambda g: (g,))


def clip(x, lo, hi, straight_through=False):
    """Clamp to [lo, hi].

    The gradient is zeroed where the clamp is active unless
    ``straight_through`` is set (for clamps that only absorb round-off).
    """
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    if straight_through:
        return Tensor._make(out, (x,), lambda g: (g,))
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(out, (x,), lambda g: (g * inside,))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    return Tensor._make(data, tuple(tensors), back)


def sparse_rows_matmul(coeffs, basis):
    """``coeffs @ basis`` for a constant scipy sparse ``basis`` of shape (C, P)."""
    coeffs = as_tensor(coeffs)
    basis_t = basis.T.tocsr()
    out = np.asarray((basis_t @ coeffs.data.T).T)
    return Tensor._make(out, (coeffs,), lambda g: (np.asarray((basis @ g.T).T),))


# convolutional layers ------------------------------------------------------


def conv2d(x, w, b):
    """3x3-style 'same' convolution (cross-correlation), stride 1.

    x: (B, C, H, W), w: (O, C, k, k) with odd k, b: (O,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    k = w.shape[-1]
    p = k // 2
    xd, wd = x.data, w.data
    xpad = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))  # B,C,H,W,k,k
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3]))  # B,H,W,O
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def back(g):
        gx = gw = None
        if x.requires_grad:
            gpad = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
            gwin = sliding_window_view(gpad, (k, k), axis=(2, 3))  # B,O,H,W,k,k
            wflip = wd[:, :, ::-1, ::-1]
            gx = np.tensordot(gwin, wflip, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return Tensor._make(out, (x, w, b), back)


def avgpool2(x):
    """2x2 average pooling with stride 2 over (B, C, H, W); H, W even."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def back(g):
        g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (g,)

    return Tensor._make(out, (x,), back)
