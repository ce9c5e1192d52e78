"""Affine layers, ReLU MLPs, the LSTM cell and the parameter registry.

Layers are views over named tensors: a :class:`ParamStore` owns the numpy
values, ``store.bind(tape)`` turns them into (optionally tracked) tensors,
and ``LinearLayer.from_params`` / ``Mlp.from_params`` / ``LstmCell.from_params``
assemble the building blocks that the forward functions consume.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .rng import stream

FORGET_BIAS = 1.0


@dataclass
class ParamInfo:
    kind: str  # "weight" | "bias" | "lstm_weight" | "lstm_bias"
    fan_in: int = 0
    fan_out: int = 0


class ParamStore:
    """Ordered named parameters with deterministic iteration order."""

    def __init__(self):
        self._values = OrderedDict()
        self._info = {}

    def add(self, name, shape, kind, fan_in=0, fan_out=0):
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._values[name] = np.zeros(shape)
        self._info[name] = ParamInfo(kind, fan_in, fan_out)

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise DimensionError(
                f"parameter {name!r} expects shape {self._values[name].shape}, got {value.shape}"
            )
        self._values[name] = value

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def info(self, name):
        return self._info[name]

    def count(self):
        return int(sum(v.size for v in self._values.values()))

    def groups(self):
        """Top-level name prefixes in registration order."""
        out = []
        for name in self._values:
            g = name.split(".", 1)[0]
            if g not in out:
                out.append(g)
        return out

    def copy(self):
        new = ParamStore()
        for name, v in self._values.items():
            new._values[name] = v.copy()
            new._info[name] = self._info[name]
        return new

    def bind(self, tape=None):
        """Name -> Tensor mapping; tracked on ``tape`` when given."""
        if tape is None:
            return {name: T.Tensor(v) for name, v in self._values.items()}
        return {name: tape.watch(v) for name, v in self._values.items()}

    def flat(self):
        if not self._values:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self._values.values()])

    def bitwise_equal(self, other):
        if self.names() != other.names():
            return False
        return all(
            self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes() for n in self
        )


def glorot_bound(fan_in, fan_out):
    return np.sqrt(6.0 / (fan_in + fan_out))


def init_params(store, seed, scheme="glorot"):
    """Fill ``store`` in place and return it.

    ``"glorot"``: weights ~ U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
    biases zero, LSTM forget-gate bias 1.0. Each parameter draws from its own
    named stream, so values do not depend on registration order.
    ``"zeros"``: everything zero (used by tests).
    """
    if scheme not in ("glorot", "zeros"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    for name in store:
        info = store.info(name)
        shape = store[name].shape
        if scheme == "zeros":
            store[name] = np.zeros(shape)
            continue
        if info.kind in ("weight", "lstm_weight"):
            a = glorot_bound(info.fan_in, info.fan_out)
            store[name] = stream(seed, "init", name).uniform(-a, a, size=shape)
        elif info.kind == "lstm_bias":
            b = np.zeros(shape)
            p = shape[0] // 4
            b[p : 2 * p] = FORGET_BIAS
            store[name] = b
        else:
            store[name] = np.zeros(shape)
    return store


class LinearLayer:
    """``y = x W^T + b`` with ``W`` of shape [out x in]."""

    def __init__(self, W, b):
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise DimensionError(f"linear layer shapes W={W.shape} b={b.shape} are inconsistent")
        self.W = W
        self.b = b
        self._Wt = None

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    @property
    def Wt(self):
        if self._Wt is None:
            self._Wt = T.transpose(self.W)
        return self._Wt

    @staticmethod
    def register(store, name, n_in, n_out):
        store.add(f"{name}.W", (n_out, n_in), "weight", n_in, n_out)
        store.add(f"{name}.b", (n_out,), "bias")

    @classmethod
    def from_params(cls, params, name):
        return cls(params[f"{name}.W"], params[f"{name}.b"])


def linear_forward(layer, x):
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise DimensionError(f"linear layer expects [batch x {layer.n_in}], got {x.shape}")
    return T.matmul(x, layer.Wt) + layer.b


@dataclass
class Mlp:
    """Affine layers with ReLU between them; the last layer is left linear."""

    layers: list = field(default_factory=list)

    @staticmethod
    def layer_sizes(n_in, width, depth, n_out):
        dims = [n_in] + [width] * depth + [n_out]
        return list(zip(dims[:-1], dims[1:]))

    @staticmethod
    def register(store, name, n_in, width, depth, n_out):
        for i, (a, b) in enumerate(Mlp.layer_sizes(n_in, width, depth, n_out)):
            LinearLayer.register(store, f"{name}.layer{i}", a, b)

    @classmethod
    def from_params(cls, params, name):
        layers = []
        i = 0
        while f"{name}.layer{i}.W" in params:
            layers.append(LinearLayer.from_params(params, f"{name}.layer{i}"))
            i += 1
        if not layers:
            raise KeyError(f"no layers registered under {name!r}")
        return cls(layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out


def mlp_forward(mlp, x):
    for i in range(len(mlp.layers) - 1):
        x = T.relu(linear_forward(mlp.layers[i], x))
    return linear_forward(mlp.layers[-1], x)


class LstmCell:
    """Single LSTM cell; gate blocks of ``W``/``b`` are ordered i, f, o, g.

    ``W`` has shape [4p x (in + p)] and acts on ``concat(x, h)``.
    """

    def __init__(self, W, b):
        p4, n = W.shape
        if p4 % 4 or b.shape != (p4,) or n <= p4 // 4:
            raise DimensionError(f"LSTM shapes W={W.shape} b={b.shape} are inconsistent")
        self.W = W
        self.b = b
        self.hidden = p4 // 4
        self.n_in = n - self.hidden
        self._Wt = None

    @property
    def Wt(self):
        if self._Wt is None:
            self._Wt = T.transpose(self.W)
        return self._Wt

    @staticmethod
    def register(store, name, n_in, hidden):
        store.add(f"{name}.W", (4 * hidden, n_in + hidden), "lstm_weight", n_in + hidden, hidden)
        store.add(f"{name}.b", (4 * hidden,), "lstm_bias")

    @classmethod
    def from_params(cls, params, name):
        return cls(params[f"{name}.W"], params[f"{name}.b"])


def lstm_step(cell, x, h, c):
    """One LSTM transition; returns ``(h_next, c_next)``."""
    p = cell.hidden
    if x.ndim != 2 or x.shape[1] != cell.n_in:
        raise DimensionError(f"LSTM expects input [batch x {cell.n_in}], got {x.shape}")
    if h.shape != (x.shape[0], p) or c.shape != (x.shape[0], p):
        raise DimensionError(f"LSTM state shapes h={h.shape} c={c.shape} do not match [batch x {p}]")
    pre = T.matmul(T.concat([x, h], axis=1), cell.Wt) + cell.b
    gates = T.sigmoid(T.slice(pre, 1, 0, 3 * p))
    i = T.slice(gates, 1, 0, p)
    f = T.slice(gates, 1, p, 2 * p)
    o = T.slice(gates, 1, 2 * p, 3 * p)
    g = T.tanh(T.slice(pre, 1, 3 * p, 4 * p))
    c_next = f * c + i * g
    h_next = o * T.tanh(c_next)
    return h_next, c_next
