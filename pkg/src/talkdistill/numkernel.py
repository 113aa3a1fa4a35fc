"""Dense tensors with reverse-mode autodiff, backed by numpy.

Only what the MLPs, communication modules and distillation losses need.
Every op records its parents and a backward closure on the output tensor;
:class:`GradTape` replays them in exact reverse creation order so gradient
accumulation is deterministic.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

DTYPE = np.float32
LAYER_NORM_EPS = 1e-5

_seq = itertools.count()


class Tensor:
    """An n-d float array that can take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name",
                 "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        GradTape.from_output(self).backward(grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=DTYPE):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _node(data, parents, backward):
    """Wrap ``data`` as an op output; record the graph only if needed."""
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class GradTape:
    """Nodes reachable from an output, in forward creation order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        seen, stack, nodes = set(), [out], []
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def backward(self, grad=None):
        out = self.nodes[-1]
        if not out.requires_grad:
            return
        if grad is None:
            if out.data.size != 1:
                raise DimensionError(f"backward() needs an explicit grad for shape {out.shape}")
            grad = np.ones_like(out.data)
        _accum(out, grad)
        for t in reversed(self.nodes):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


# --- elementwise / arithmetic -------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    """Elementwise product; ``b`` may be a python scalar."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _node(a.data * c, (a,), lambda g: _accum(a, g * c))
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
                 lambda g: _accum(x, g * mask))


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Normalise over the last axis, then apply learned scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: scale {gamma.shape} / shift {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * rstd
    n = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accum(x, rstd * (gx - gx.mean(axis=-1, keepdims=True)
                              - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def dropout(x, rate, rng, training=True):
    """Inverted dropout. Identity in eval mode or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / x.data.dtype.type(keep)
    return _node(x.data * mask, (x,), lambda g: _accum(x, g * mask))


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            _accum(t, part)

    return _node(data, tensors, backward)


def take_cols(x, start, stop):
    """Columns ``start:stop`` of a 2-d tensor."""
    x = _as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accum(x, full)

    return _node(x.data[:, start:stop], (x,), backward)


def sum_all(x):
    x = _as_tensor(x)
    return _node(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                 lambda g: _accum(x, np.broadcast_to(g, x.shape)))


def mean_all(x):
    x = _as_tensor(x)
    n = x.data.size
    return _node(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                 lambda g: _accum(x, np.broadcast_to(g / n, x.shape)))


def embedding(table, idx):
    """Row lookup ``table[idx]``; gradient scatter-adds back into the table."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accum(table, full)

    return _node(table.data[idx], (table,), backward)


def embedding_bag(table, idx, seg, n_bags):
    """Mean of ``table[idx]`` grouped by ``seg``; empty bags give zeros."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_bags).astype(table.data.dtype)
    w = (1.0 / counts[seg])[:, None] if len(seg) else np.zeros((0, 1), table.data.dtype)
    out = np.zeros((n_bags, table.shape[1]), dtype=table.data.dtype)
    np.add.at(out, seg, table.data[idx] * w)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g[seg] * w)
        _accum(table, full)

    return _node(out, (table,), backward)


# --- losses ----------------------------------------------------------------

def mse(a, b):
    """Mean over all elements of ``(a - b)**2``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.asarray(np.mean(diff * diff), dtype=a.data.dtype)

    def backward(g):
        gd = (2.0 / n) * g * diff
        _accum(a, gd)
        _accum(b, -gd)

    return _node(data, (a, b), backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    data = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _accum(logits, g * p / len(labels))

    return _node(data, (logits,), backward)


# --- optimisation -------------------------------------------------------------

def parameter(data, name=None):
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=True, name=name)


def freeze(params, frozen=True):
    for p in params:
        p.frozen = frozen
        p.requires_grad = not frozen
        p.grad = None


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam with bias correction. Frozen parameters are skipped entirely."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for i, p in enumerate(self.params):
            self.state.m[i] = np.zeros_like(p.data)
            self.state.v[i] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        st = self.state
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(
                    f"non-finite gradient for parameter {p.name or i} (shape {p.shape}); step aborted")
        st.t += 1
        bc1 = 1.0 - st.beta1 ** st.t
        bc2 = 1.0 - st.beta2 ** st.t
        for i, p in enumerate(self.params):
            if p.frozen:
                continue
            g = p.grad if p.grad is not None else 0.0
            m, v = st.m[i], st.v[i]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * np.square(g)
            p.data -= (st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)).astype(p.data.dtype)
