"""Minimal dense tensor with tape-based reverse-mode autodiff.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape nothing is recorded,
so inference runs at plain numpy speed.

Data is float32 by default. Float64 flows through unchanged, which is what
the finite-difference oracle in :func:`grad_check` relies on.
"""

import math
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

_local = threading.local()


def _tapes():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


class Tensor:
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of operations; inputs always precede outputs."""

    def __init__(self, check_nan=True):
        self.nodes = []
        self.check_nan = check_nan

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        return False

    def record(self, op, inputs, output, backward):
        if self.check_nan and np.isnan(output.data).any():
            raise FloatingPointError(f"NaN in forward value at node {len(self.nodes)} ({op})")
        self.nodes.append(Node(op, inputs, output, backward))

    def gradient(self, out, wrt):
        """Reverse sweep from scalar ``out``; returns one array per tensor in ``wrt``."""
        grads = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        return [grads.get(id(x), np.zeros_like(x.data)) for x in wrt]


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32) if not isinstance(x, np.ndarray) else x)


def _make(op, data, inputs, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _t(a), _t(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _t(a), _t(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _t(a), _t(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _t(a), _t(b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a):
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a):
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a):
    """log(1 + exp(a)), computed stably."""
    out = np.logaddexp(0, a.data)
    return _make("softplus", out, (a,), lambda g: (g * 0.5 * (1 + np.tanh(0.5 * a.data)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1 + t)

    def back(g):
        dt = (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return _make("gelu", out, (a,), back)


# ---------------------------------------------------------------- linear algebra

def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    a, b = _t(a), _t(b)
    out = np.matmul(a.data, b.data)

    def back(g):
        if b.ndim == 2 and a.ndim >= 2:
            ga = np.matmul(g, b.data.T)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(np.matmul(g, _swap(b.data)), a.shape)
        gb = _unbroadcast(np.matmul(_swap(a.data), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), back)


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx):
    """Slicing and integer-array gather; gradients scatter-add back."""
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    out = a.data[idx]
    advanced = _is_advanced(idx)

    def back(g):
        full = np.zeros_like(a.data, dtype=g.dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make("getitem", np.array(out) if np.ndim(out) == 0 else out, (a,), back)


def index_add(base, idx, src):
    """Return ``base`` with rows of ``src`` added at row indices ``idx`` (duplicates accumulate)."""
    base, src = _t(base), _t(src)
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.astype(np.result_type(base.data, src.data), copy=True)
    np.add.at(out, idx, src.data)
    return _make("index_add", out, (base, src), lambda g: (g, g[idx]))


def concat(tensors, axis=0):
    tensors = [_t(x) for x in tensors]
    out = np.concatenate([x.data for x in tensors], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in tensors])[:-1]
    return _make("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


# ---------------------------------------------------------------- normalisers

def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), back)


def layer_norm(x, weight, bias, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    weight, bias = _t(weight), _t(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def back(g):
        dxhat = g * weight.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make("layer_norm", out, (x, weight, bias), back)


def cross_entropy(logits, targets, mask=None):
    """Mean next-token cross-entropy over rows where ``mask`` is true.

    ``logits`` [n, V]; ``targets`` int [n]; ``mask`` bool [n] or None.
    """
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets)) if mask is None else np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(rows) == 0:
        raise ValueError("cross_entropy needs at least one unmasked target")
    lp = log_softmax(getitem(logits, rows) if len(rows) != logits.shape[0] else logits)
    picked = getitem(lp, (np.arange(len(rows)), targets[rows]))
    return neg(mean(picked))


def rotate_pairs(x, angles):
    """Rotate interleaved channel pairs of x [n, H, D] by ``angles`` [n, D/2].

    cos/sin are taken in float64 before casting to the data dtype, so large
    positions keep their phase accuracy.
    """
    from . import kernels

    angles = np.asarray(angles, dtype=np.float64)
    c = np.cos(angles).astype(x.dtype)
    s = np.sin(angles).astype(x.dtype)
    out = kernels.rope_rotate(x.data, c, s)
    return _make("rotate_pairs", out, (x,), lambda g: (kernels.rope_rotate(g, c, -s),))


# ---------------------------------------------------------------- driving autodiff

def forward_backward(f, inputs, check_nan=True):
    """Evaluate scalar ``f(*inputs)`` and return ``(value, grads)``."""
    for x in inputs:
        if not x.requires_grad:
            raise ValueError("forward_backward inputs must have requires_grad=True")
    with Tape(check_nan=check_nan) as tape:
        value = f(*inputs)
    if value.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {value.shape}")
    grads = tape.gradient(value, inputs)
    return value, [Tensor(g) for g in grads]


def grad_check(f, x, eps=1e-3, max_coords=None, seed=0):
    """Max over checked coordinates of |analytic - central difference| / max(1, |central difference|).

    ``x`` is a Tensor or a list of Tensors (passed positionally to ``f``).
    Analytic gradients are taken at the inputs' own precision; the central
    differences are evaluated with every input promoted to float64.
    ``max_coords`` caps the coordinates checked per input (sampled by ``seed``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data, requires_grad=True) for t in xs]
    _, grads = forward_backward(f, leaves)
    base64 = [t.data.astype(np.float64) for t in xs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(xs):
        n = t.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            vals = []
            for sign in (1.0, -1.0):
                pert = [b.copy() for b in base64]
                pert[i].reshape(-1)[c] += sign * eps
                vals.append(float(f(*[Tensor(p) for p in pert]).data.reshape(-1)[0]))
            fd = (vals[0] - vals[1]) / (2 * eps)
            an = float(grads[i].data.reshape(-1)[c])
            worst = max(worst, abs(an - fd) / max(1.0, abs(fd)))
    return worst


def parameter(data):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
