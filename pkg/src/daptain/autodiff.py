"""Minimal reverse-mode differentiation over numpy arrays.

Only the layers the enhancement and domain networks need are provided.
Every op checks its output for non-finite values and raises
``NumericalError`` naming the op instead of letting NaN propagate.

Training runs in float32; ``precision(np.float64)`` switches newly created
tensors to float64 for gradient checking.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ShapeError

_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def _finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf", dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f"
                          else default_dtype())
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def _node(data, parents, op, backward):
    out = Tensor(_finite(data, op), _parents=tuple(parents), op=op, dtype=data.dtype)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# generic ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), "add", backward)


def neg(a):
    return _node(-a.data, (a,), "neg", lambda g: a._accum(-g))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), "mul", backward)


def square(a):
    return _node(a.data * a.data, (a,), "square", lambda g: a._accum(2.0 * a.data * g))


def tabs(a):
    """Absolute value; subgradient 0 at the kink."""
    return _node(np.abs(a.data), (a,), "abs", lambda g: a._accum(np.sign(a.data) * g))


def tsum(a, axis=None):
    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape))
    return _node(np.asarray(a.data.sum(axis=axis)), (a,), "sum", backward)


def tmean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: a._accum(g.reshape(a.shape)))


def crop(a, start, length):
    """Slice ``[start, start + length)`` along the last axis."""
    if start < 0 or start + length > a.shape[-1]:
        raise ShapeError(f"crop [{start}, {start + length}) outside length {a.shape[-1]}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:start + length] = g
        a._accum(full)
    return _node(a.data[..., start:start + length], (a,), "crop", backward)


def grad_reverse(a, beta=1.0):
    """Identity forward; multiplies the incoming gradient by ``-beta``."""
    return _node(a.data.copy(), (a,), "grad_reverse", lambda g: a._accum(-beta * g))


# ---------------------------------------------------------------------------
# layers


def dense(x, W, b=None):
    """``x @ W + b`` for ``x`` of shape (n, d_in)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match {W.shape[1]} outputs")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        if x.requires_grad:
            x._accum(g @ W.data.T)
        if W.requires_grad:
            W._accum(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0))
    return _node(out, parents, "dense", backward)


def conv1d(x, W, b=None, stride=1):
    """Cross-correlation with "same" zero padding.

    ``x``: (n, C_in, L), ``W``: (C_out, C_in, K) with odd K. Output length is
    ``ceil(L / stride)``.
    """
    if x.data.ndim != 3 or W.data.ndim != 3 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernels {W.shape}")
    if stride not in (1, 2):
        raise ShapeError("conv1d: stride must be 1 or 2")
    c_out, c_in, k = W.shape
    if k % 2 == 0:
        raise ShapeError("conv1d: kernel length must be odd")
    n, _, length = x.shape
    pad = k // 2
    l_out = -(-length // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=2)[:, :, : stride * (l_out - 1) + 1: stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * l_out, c_in * k)
    wmat = W.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T).reshape(n, l_out, c_out).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(n * l_out, c_out)
        if W.requires_grad:
            W._accum((g2.T @ cols).reshape(W.shape))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2)))
        if x.requires_grad:
            # transposed convolution: correlate the zero-dilated, zero-padded
            # output gradient with the flipped kernels
            span = stride * (l_out - 1) + 1
            total = max(2 * (k - 1) + span, length + pad + k - 1)
            gdp = np.zeros((n, c_out, total), dtype=g.dtype)
            gdp[:, :, k - 1:k - 1 + span:stride] = g
            gwin = sliding_window_view(gdp, k, axis=2)[:, :, pad:pad + length, :]
            gcols = np.ascontiguousarray(gwin.transpose(0, 2, 1, 3)).reshape(n * length, c_out * k)
            wflip = np.ascontiguousarray(W.data[:, :, ::-1].transpose(0, 2, 1)).reshape(c_out * k, c_in)
            dx = (gcols @ wflip).reshape(n, length, c_in).transpose(0, 2, 1)
            x._accum(dx)
    return _node(out, parents, "conv1d", backward)


def upsample(x, factor=2):
    """Nearest-neighbour upsampling along the last axis."""
    def backward(g):
        x._accum(g.reshape(*x.shape, factor).sum(axis=-1))
    return _node(np.repeat(x.data, factor, axis=-1), (x,), "upsample", backward)


def leaky_relu(x, alpha=0.1):
    """``x`` where ``x >= 0`` else ``alpha * x``; slope 1 at zero."""
    x = as_tensor(x)
    slope = np.where(x.data >= 0, 1.0, alpha).astype(x.dtype)
    return _node(x.data * slope, (x,), "leaky_relu", lambda g: x._accum(g * slope))


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _node(s, (x,), "sigmoid", lambda g: x._accum(g * s * (1.0 - s)))


PROB_CLAMP = 1e-7


def bce_loss(pred, labels, weights=None):
    """``-mean_i w_i [y_i log p_i + (1 - y_i) log(1 - p_i)]``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the clamp passes no
    gradient.
    """
    pred = as_tensor(pred)
    y = np.asarray(labels, dtype=pred.dtype).reshape(pred.shape)
    w = np.ones_like(y) if weights is None else np.asarray(
        weights.data if isinstance(weights, Tensor) else weights, dtype=pred.dtype).reshape(pred.shape)
    if np.any(w < 0):
        raise ValueError("bce_loss: sample weights must be nonnegative")
    p = np.clip(pred.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    per = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    value = np.asarray((w * per).sum() / n, dtype=pred.dtype)
    inside = (pred.data >= PROB_CLAMP) & (pred.data <= 1.0 - PROB_CLAMP)

    def backward(g):
        dp = -w * (y / p - (1.0 - y) / (1.0 - p)) / n
        pred._accum(g * dp * inside)
    return _node(value, (pred,), "bce", backward)


def summed_variance(z):
    """Sum over latent dimensions of the batch (population) variance."""
    centered = z.data - z.data.mean(axis=0, keepdims=True)
    n = z.shape[0]
    value = np.asarray((centered * centered).sum() / n, dtype=z.dtype)
    return _node(value, (z,), "summed_variance", lambda g: z._accum(g * 2.0 * centered / n))


# ---------------------------------------------------------------------------
# parameters and optimisation


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype or default_dtype())


def he_uniform(rng, shape, fan_in, alpha=None, dtype=None):
    """Variance-preserving uniform init: ``var = gain / fan_in``.

    ``alpha`` is the negative slope of a following leaky ReLU (gain
    ``2 / (1 + alpha^2)``); ``None`` means a linear layer (gain 1).
    """
    gain = 1.0 if alpha is None else 2.0 / (1.0 + alpha * alpha)
    limit = np.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype or default_dtype())


class ParamStore:
    """Ordered name -> Tensor mapping; gradients live on the tensors."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=True)
        self._params[name] = t
        return t

    @classmethod
    def merged(cls, *stores):
        """A view sharing the tensors of several stores."""
        out = cls()
        for store in stores:
            for k, v in store.items():
                if k in out._params:
                    raise KeyError(f"duplicate parameter name {k!r}")
                out._params[k] = v
        return out

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def count(self):
        return int(sum(p.data.size for p in self._params.values()))

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, state):
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            if self._params[k].shape != v.shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=self._params[k].dtype, copy=True)

    def astype(self, dtype):
        for p in self._params.values():
            p.data = p.data.astype(dtype)
        return self


def l2_penalty(params: ParamStore, coefficient, names=None):
    """``coefficient * sum ||W||^2`` over ``names`` (default: all)."""
    if coefficient < 0:
        raise ValueError("coefficient must be nonnegative")
    names = params.names() if names is None else names
    total = None
    for name in names:
        term = tsum(square(params[name]))
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor(0.0)
    return mul(total, coefficient)


class RMSprop:
    """``acc <- rho acc + (1 - rho) g^2;  p <- p - lr g / (sqrt(acc) + eps)``."""

    def __init__(self, params: ParamStore, lr=1e-3, rho=0.9, eps=1e-8):
        self.params = params
        self.lr, self.rho, self.eps = lr, rho, eps
        self.acc = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, names=None):
        for k in (self.params.names() if names is None else names):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad
            acc = self.acc.setdefault(k, np.zeros_like(p.data))
            acc *= self.rho
            acc += (1.0 - self.rho) * g * g
            p.data -= (self.lr * g / (np.sqrt(acc) + self.eps)).astype(p.dtype)
