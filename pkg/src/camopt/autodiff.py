"""Dense float64 tensors plus a minimal reverse-mode differentiation tape.

Tensors are immutable values. An op records its inputs and a backward
closure whenever at least one input is traced (requires_grad or itself
produced by a traced op); backward(loss) walks the recorded graph once and
returns a gradient map keyed by tensor identity. Gradients accumulate
additively at fan-out points.
"""

import numpy as np
from scipy.special import expit


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _readonly(data):
    arr = np.asarray(data, dtype=np.float64).view()
    arr.setflags(write=False)
    return arr


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeMismatchError(f"{op}: incompatible shapes {a} and {b}") from None


class Tensor:
    """Immutable float64 array with the hooks needed by backward().

    _parents and _backward are set only by ops; user-built tensors are
    leaves. Identity (not value) is what the gradient map is keyed by, so
    equality and hashing are left at object identity.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _readonly(data)
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def traced(self):
        return self.requires_grad or bool(self._parents)

    def item(self):
        return float(self.data)

    def detach(self):
        """Constant-valued copy severed from the tape."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, traced={self.traced()})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    # -- elementwise ---------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,))

    def log(self):
        return _make(np.log(self.data), (self,), lambda g: (g / self.data,))

    def tanh(self):
        out = np.tanh(self.data)
        return _make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        out = expit(self.data)
        return _make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self):
        mask = self.data > 0
        return _make(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    def abs(self):
        # d|x|/dx taken as sign(x), which is 0 at x = 0.
        return _make(np.abs(self.data), (self,), lambda g: (g * np.sign(self.data),))

    def sign(self):
        # Treated as a constant in the backward pass.
        return _make(np.sign(self.data), (self,), lambda g: (np.zeros_like(self.data),))

    # -- shape and reductions -------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, axes=None):
        perm = tuple(axes) if axes is not None else tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(perm))
        return _make(self.data.transpose(perm), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _make(out, (self,), _bw)

    def mean(self, axis=None, keepdims=False):
        out = self.data.mean(axis=axis, keepdims=keepdims)
        shape = self.data.shape
        count = self.data.size if axis is None else np.prod(
            [shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape) / count,)

        return _make(out, (self,), _bw)


def _ensure(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    if any(p.traced() for p in parents):
        return Tensor(data, _parents=parents, _backward=backward_fn)
    return Tensor(data)


# -- binary ops ---------------------------------------------------------


def add(a, b):
    a, b = _ensure(a), _ensure(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _ensure(a), _ensure(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _ensure(a), _ensure(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def div(a, b):
    a, b = _ensure(a), _ensure(b)
    _broadcast_shape(a.shape, b.shape, "div")
    sa, sb = a.shape, b.shape
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, sa),
                            _unbroadcast(-g * a.data / (b.data * b.data), sb)))


def neg(a):
    a = _ensure(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _ensure(a), _ensure(b)
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeMismatchError(
            f"matmul: incompatible shapes {ad.shape} and {bd.shape}") from None
    a_vec, b_vec = ad.ndim == 1, bd.ndim == 1
    A = ad[None, :] if a_vec else ad
    B = bd[:, None] if b_vec else bd

    def _bw(g):
        g2 = g
        if a_vec and b_vec:
            g2 = g[None, None]
        elif a_vec:
            g2 = g[..., None, :]
        elif b_vec:
            g2 = g[..., :, None]
        ga = _unbroadcast(np.matmul(g2, B.swapaxes(-1, -2)), A.shape)
        gb = _unbroadcast(np.matmul(A.swapaxes(-1, -2), g2), B.shape)
        if a_vec:
            ga = ga[0]
        if b_vec:
            gb = gb[:, 0]
        return (ga, gb)

    return _make(out, (a, b), _bw)


# -- structural ops ------------------------------------------------------


def narrow(t, key):
    """Basic-indexing slice of a tensor (ints, slices, tuples thereof)."""
    t = _ensure(t)
    out = t.data[key]
    shape = t.data.shape

    def _bw(g):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _make(out, (t,), _bw)


def concat(tensors, axis=0):
    tensors = [_ensure(t) for t in tensors]
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), _bw)


# -- losses --------------------------------------------------------------


def mse(a, b):
    """Mean squared error between same-shaped tensors (scalar output)."""
    a, b = _ensure(a), _ensure(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = max(diff.size, 1)

    def _bw(g):
        ga = g * 2.0 * diff / n
        return (ga, -ga)

    return _make(np.float64(np.mean(diff * diff)) if diff.size else np.float64(0.0),
                 (a, b), _bw)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    logits: (n, c) or (c,); labels: (n,) int array or scalar int.
    """
    t = _ensure(logits)
    x = t.data
    squeeze = x.ndim == 1
    X = x[None, :] if squeeze else x
    if X.ndim != 2:
        raise ShapeMismatchError(
            f"softmax_cross_entropy: logits must be 1-D or 2-D, got {x.shape}")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape != (X.shape[0],):
        raise ShapeMismatchError(
            f"softmax_cross_entropy: incompatible shapes {x.shape} and {lab.shape}")
    if np.any(lab < 0) or np.any(lab >= X.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    n = X.shape[0]
    shift = X - X.max(axis=1, keepdims=True)
    ez = np.exp(shift)
    probs = ez / ez.sum(axis=1, keepdims=True)
    losses = np.log(ez.sum(axis=1)) - shift[np.arange(n), lab]
    out = np.float64(losses.mean())

    def _bw(g):
        gx = probs.copy()
        gx[np.arange(n), lab] -= 1.0
        gx *= g / n
        return (gx[0] if squeeze else gx,)

    return _make(out, (t,), _bw)


# -- backward ------------------------------------------------------------


def backward(loss):
    """Gradient of a scalar loss w.r.t. every tensor in its graph.

    Returns {tensor -> gradient Tensor}, keyed by identity. Tensors that
    the loss does not depend on are absent from the map.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads = {id(loss): np.ones((), dtype=np.float64)}
    by_id = {id(loss): loss}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            pid = id(parent)
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
            by_id[pid] = parent
    return {by_id[i]: Tensor(g) for i, g in grads.items()}
