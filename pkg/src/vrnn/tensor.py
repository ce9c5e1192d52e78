"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tensor` is a thin wrapper around a ``numpy.ndarray``. Operations on
tensors are plain functions (``matmul``, ``unary``, ``binary``, ``reduce``,
``concat``, ...). When a :class:`Tape` is active and at least one input is
tracked on it, the operation appends a node holding the inputs' node ids and a
closure over the forward values needed for its vector-Jacobian product.
Otherwise the operation is a plain numpy computation and nothing is recorded.

Typical use::

    with Tape() as tape:
        w = tape.watch(w_value)
        loss = reduce("sum", unary("square", w))
    grads = tape.backward(loss)
    dw = grads[w]
"""

import threading
from math import prod

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_local = threading.local()


def _active():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Real array, optionally bound to a node of a tape."""

    __slots__ = ("value", "node", "tape")
    __array_priority__ = 100

    def __init__(self, value, node=None, tape=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on tensor of shape {self.shape}")

    def __repr__(self):
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    def __add__(self, other):
        return binary("add", self, other)

    def __radd__(self, other):
        return binary("add", _as_tensor(other, self), self)

    def __sub__(self, other):
        return binary("sub", self, other)

    def __rsub__(self, other):
        return binary("sub", _as_tensor(other, self), self)

    def __mul__(self, other):
        return binary("mul", self, other)

    def __rmul__(self, other):
        return binary("mul", _as_tensor(other, self), self)

    def __truediv__(self, other):
        return binary("div", self, other)

    def __rtruediv__(self, other):
        return binary("div", _as_tensor(other, self), self)

    def __neg__(self):
        return unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(value):
    """Untracked tensor (a constant with respect to any tape)."""
    return Tensor(np.array(value, dtype=np.float64))


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 and like is not None:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Nodes are appended in execution order, so every node's inputs precede it.
    A tape is used by one thread only; tapes nest, and only the innermost is
    recorded into.
    """

    def __init__(self):
        self._parents = []
        self._vjp = []
        self._shapes = []
        self._grads = None

    def __len__(self):
        return len(self._parents)

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def watch(self, x):
        """Return a leaf tensor on this tape sharing ``x``'s values."""
        value = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        return self._append(value, (), None)

    def _append(self, value, parents, vjp):
        node = len(self._parents)
        self._parents.append(parents)
        self._vjp.append(vjp)
        self._shapes.append(value.shape)
        return Tensor(value, node, self)

    def record(self, value, inputs, vjp):
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        return self._append(value, parents, vjp)

    def backward(self, loss):
        """Populate gradients of ``loss`` for every ancestor node.

        Returns a :class:`Gradients` mapping indexed by tracked tensors.
        """
        if loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads = [None] * len(self._parents)
        grads[loss.node] = np.ones(loss.shape)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            vjp = self._vjp[i]
            if g is None or vjp is None:
                continue
            parents = self._parents[i]
            outs = vjp(g)
            for pid, go in zip(parents, outs):
                if pid is None or go is None:
                    continue
                grads[pid] = go if grads[pid] is None else grads[pid] + go
            # saved forward values are released once consumed
            self._vjp[i] = None
        self._grads = grads
        return Gradients(self, grads)

    def grad(self, t):
        if self._grads is None:
            raise ContractError("backward() has not been run on this tape")
        if t.tape is not self:
            raise ContractError("tensor is not recorded on this tape")
        g = self._grads[t.node]
        return np.zeros(self._shapes[t.node]) if g is None else g


class Gradients:
    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t):
        return self._tape.grad(t)


def backward(tape, loss):
    return tape.backward(loss)


def _make(value, inputs, vjp):
    tape = _active()
    if tape is not None:
        for t in inputs:
            if t.tape is tape:
                return tape.record(value, inputs, vjp)
    return Tensor(value)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), vjp)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def unary(kind, x):
    x = _as_tensor(x)
    v = x.value
    if kind == "exp":
        y = np.exp(v)
        vjp = lambda g: (g * y,)
    elif kind == "log":
        bad = np.argwhere(~(v > 0))
        if bad.size:
            idx = tuple(int(i) for i in bad[0])
            raise DomainError(f"log of non-positive value {v[idx]!r} at index {idx}")
        y = np.log(v)
        vjp = lambda g: (g / v,)
    elif kind == "tanh":
        y = np.tanh(v)
        vjp = lambda g: (g * (1.0 - y * y),)
    elif kind == "sigmoid":
        y = _sigmoid(v)
        vjp = lambda g: (g * y * (1.0 - y),)
    elif kind == "relu":
        y = np.maximum(v, 0.0)
        vjp = lambda g: (g * (v > 0),)
    elif kind == "softplus":
        y = np.logaddexp(0.0, v)
        vjp = lambda g: (g * _sigmoid(v),)
    elif kind == "neg":
        y = -v
        vjp = lambda g: (-g,)
    elif kind == "square":
        y = v * v
        vjp = lambda g: (2.0 * g * v,)
    else:
        raise ValueError(f"unknown unary op {kind!r}")
    return _make(y, (x,), vjp)


def exp(x):
    return unary("exp", x)


def log(x):
    return unary("log", x)


def tanh(x):
    return unary("tanh", x)


def sigmoid(x):
    return unary("sigmoid", x)


def relu(x):
    return unary("relu", x)


def softplus(x):
    return unary("softplus", x)


def square(x):
    return unary("square", x)


def binary(kind, a, b):
    """Elementwise ``a (op) b``.

    Shapes must be equal, or ``b`` may have shape ``a.shape[1:]`` in which case
    it is applied to every slice along the leading axis (row-vector bias).
    A Python scalar on either side is treated as a constant of matching shape.
    """
    b = _as_tensor(b, a if isinstance(a, Tensor) else None)
    a = _as_tensor(a, b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        rows = False
    elif av.ndim >= 1 and bv.shape == av.shape[1:]:
        rows = True
    else:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")

    def fold(gb):
        return gb.sum(axis=0) if rows else gb

    if kind == "add":
        y = av + bv
        vjp = lambda g: (g, fold(g))
    elif kind == "sub":
        y = av - bv
        vjp = lambda g: (g, fold(-g))
    elif kind == "mul":
        y = av * bv
        vjp = lambda g: (g * bv, fold(g * av))
    elif kind == "div":
        y = av / bv
        vjp = lambda g: (g / bv, fold(-g * av / (bv * bv)))
    else:
        raise ValueError(f"unknown binary op {kind!r}")
    return _make(y, (a, b), vjp)


def add(a, b):
    return binary("add", a, b)


def sub(a, b):
    return binary("sub", a, b)


def mul(a, b):
    return binary("mul", a, b)


def div(a, b):
    return binary("div", a, b)


def _check_axis(x, axis):
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def reduce(kind, x, axis=None):
    """Reduce over ``axis`` (all axes when ``None``); the axis is dropped."""
    x = _as_tensor(x)
    v = x.value
    axis = _check_axis(x, axis)
    shape = v.shape

    def expand(g):
        return g if axis is None else np.expand_dims(g, axis)

    if kind == "sum":
        y = v.sum(axis=axis)
        vjp = lambda g: (np.broadcast_to(expand(g), shape).copy(),)
    elif kind == "mean":
        n = v.size if axis is None else shape[axis]
        y = v.mean(axis=axis)
        vjp = lambda g: (np.broadcast_to(expand(g) / n, shape).copy(),)
    elif kind == "logsumexp":
        m = v.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.exp(v - m).sum(axis=axis, keepdims=True)
        y_keep = np.log(s) + m
        y = y_keep.reshape(()) if axis is None else np.squeeze(y_keep, axis=axis)
        vjp = lambda g: (expand(g) * np.exp(v - y_keep),)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _make(np.asarray(y, dtype=np.float64), (x,), vjp)


def sum(x, axis=None):  # noqa: A001
    return reduce("sum", x, axis)


def mean(x, axis=None):
    return reduce("mean", x, axis)


def logsumexp(x, axis=None):
    return reduce("logsumexp", x, axis)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of empty list")
    axis = _check_axis(parts[0], axis)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"concat: shapes {ref} and {p.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _make(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def slice(x, axis, start, stop):  # noqa: A001
    """Half-open range ``start:stop`` along ``axis``."""
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice {start}:{stop} out of bounds for axis {axis} of shape {x.shape}")
    sl = (np.s_[:],) * axis + (np.s_[start:stop],)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[sl] = g
        return (out,)

    return _make(x.value[sl], (x,), vjp)


def index(x, axis, i):
    """Select position ``i`` along ``axis``, dropping that axis."""
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    if not 0 <= i < x.shape[axis]:
        raise DimensionError(f"index {i} out of bounds for axis {axis} of shape {x.shape}")
    sl = (np.s_[:],) * axis + (i,)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[sl] = g
        return (out,)

    return _make(x.value[sl], (x,), vjp)


def stack(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("stack of empty list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise DimensionError(f"stack: shapes {ref} and {p.shape} differ")
    axis = axis % (len(ref) + 1)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(np.stack([p.value for p in parts], axis=axis), tuple(parts), vjp)


def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(shape)
    if prod(shape) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x):
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return _make(x.value.T, (x,), lambda g: (g.T,))


def repeat(x, axis, n):
    """Tile a size-1 ``axis`` ``n`` times."""
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    if x.shape[axis] != 1:
        raise DimensionError(f"repeat needs size-1 axis {axis}, got shape {x.shape}")
    return _make(np.repeat(x.value, n, axis=axis), (x,), lambda g: (g.sum(axis=axis, keepdims=True),))


def grad_check(f, x, step=1e-5):
    """Max relative error between tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be evaluable without a
    tape. The error of each coordinate is ``|analytic - numeric| /
    max(1, |analytic|)``. Returns ``inf`` if anything is non-finite.
    """
    x0 = np.array(x.value if isinstance(x, Tensor) else x, dtype=np.float64)
    with Tape() as tape:
        xt = tape.watch(x0)
        y = f(xt)
    analytic = tape.backward(y)[xt]
    flat = x0.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
        return float("inf")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
