"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray plus an optional gradient buffer and a backward
closure; composing ops builds a DAG that `backward()` walks in reverse
topological order. Everything is single-threaded and deterministic: the same
inputs and seeds produce bit-identical values and gradients.

Supported op families: affine (matmul, broadcast add/mul/...), convolution,
pooling via mean/upsample, softmax, sigmoid/tanh/rectifiers, elementwise
math, concatenation/slicing/reshape, and reductions.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Shape mismatch between two composed ops; names both sides."""


_GRAD_ENABLED = True


def grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value, dtype):
    if isinstance(value, np.ndarray):
        return value
    return np.asarray(value, dtype=dtype)


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
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
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, seed=None):
        """Backpropagate from this tensor; scalar outputs seed with 1."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"backward seed shape {seed.shape} does not match output shape {self.data.shape}"
                )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Release the graph so intermediate buffers can be collected.
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                if not node.requires_grad:
                    node.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _coerce(a, b):
    """Promote python scalars / ndarrays to Tensors sharing a dtype."""
    if not isinstance(a, Tensor):
        dtype = b.data.dtype
        a = Tensor(np.asarray(a, dtype=dtype))
    if not isinstance(b, Tensor):
        dtype = a.data.dtype
        b = Tensor(np.asarray(b, dtype=dtype))
    return a, b


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a, b = _coerce(a, b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = _coerce(a, b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = _coerce(a, b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = _coerce(a, b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd)


def power(a, p):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    p = float(p)
    data = a.data ** p

    def bwd(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), bwd)


def texp(a):
    data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * data)

    return _make(data, (a,), bwd)


def tlog(a):
    data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), bwd)


def tsqrt(a):
    data = np.sqrt(a.data)

    def bwd(g):
        a._accumulate(g * 0.5 / data)

    return _make(data, (a,), bwd)


def tabs(a):
    data = np.abs(a.data)

    def bwd(g):
        a._accumulate(g * np.sign(a.data))

    return _make(data, (a,), bwd)


def tanh(a):
    data = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), bwd)


def sigmoid(a):
    # Stable in both tails.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def bwd(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def softplus(a):
    data = np.logaddexp(0.0, a.data).astype(a.data.dtype)

    def bwd(g):
        x = a.data
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        a._accumulate(g * s.astype(x.dtype))

    return _make(data, (a,), bwd)


def relu(a):
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        a._accumulate(g * (a.data > 0))

    return _make(data, (a,), bwd)


def leaky_relu(a, slope=0.2):
    data = np.where(a.data > 0, a.data, slope * a.data).astype(a.data.dtype)

    def bwd(g):
        a._accumulate(g * np.where(a.data > 0, 1.0, slope).astype(a.data.dtype))

    return _make(data, (a,), bwd)


def bce_with_logits(logits, targets):
    """Elementwise binary cross entropy on logits, log-sum-exp stabilized.

    loss = max(l, 0) - l*y + log(1 + exp(-|l|)); grad dl = sigmoid(l) - y.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    data = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        logits._accumulate(g * (s.astype(x.dtype) - y))

    return _make(data, (logits,), bwd)


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 or g.shape != a.data.shape else g)
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis=axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype))

    return _make(np.asarray(data), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    out = tsum(a, axis=axis, keepdims=keepdims)
    return mul(out, 1.0 / count)


def softmax(a, axis=-1):
    """Softmax along `axis`; -inf logits yield exact zeros."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _make(data, (a,), bwd)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape):
    data = a.data.reshape(shape)
    old_shape = a.data.shape

    def bwd(g):
        a._accumulate(g.reshape(old_shape))

    return _make(data, (a,), bwd)


def transpose(a, axes):
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        a._accumulate(g.transpose(inv))

    return _make(data, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != (axis % len(base))):
            raise ShapeError(f"concat: incompatible shapes {base} vs {s} along axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(data, tuple(tensors), bwd)


def getitem(a, idx):
    data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        if isinstance(idx, np.ndarray) and idx.dtype.kind in "iu":
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        a._accumulate(full)

    return _make(np.ascontiguousarray(data), (a,), bwd)


def take_rows(table, ids):
    """Embedding lookup: rows of `table` gathered by an integer array."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accumulate(full)

    return _make(data, (table,), bwd)


def expand(a, shape):
    """Broadcast view to `shape` (materialized); backward sums back."""
    data = np.broadcast_to(a.data, shape)

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))

    return _make(np.ascontiguousarray(data), (a,), bwd)


def spatial_broadcast(a, h, w):
    """[B, C] -> [B, C, h, w] with every spatial position identical."""
    b, c = a.data.shape
    return expand(reshape(a, (b, c, 1, 1)), (b, c, h, w))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = _coerce(a, b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError("matmul: operands must be at least 1-D")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, lhs shape {a.data.shape} vs rhs shape {b.data.shape}"
        )
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(np.asarray(ga), a.data.shape))
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.multiply.outer(a.data, g) if g.ndim else a.data * g
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(np.asarray(gb), b.data.shape))

    return _make(data, (a, b), bwd)


# -- image ops ----------------------------------------------------------------


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of [B, Cin, H, W] with [Cout, Cin, kh, kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[1]} do not match kernel channels {w.data.shape[1]}"
        )
    bsz, cin, h, ww = x.data.shape
    cout, _, kh, kw = w.data.shape
    oh = kernels.conv_out_size(h, kh, stride, padding)
    ow = kernels.conv_out_size(ww, kw, stride, padding)
    if kh == kw == 1 and stride == 1 and padding == 0:
        # 1x1 conv: plain channel mixing, no patch extraction needed.
        cols = x.data.reshape(bsz, cin, h * ww)
        one_by_one = True
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding)  # [B, Cin*kh*kw, OH*OW]
        one_by_one = False
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)  # [B, Cout, OH*OW]
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(bsz, cout, oh, ow)

    def bwd(g):
        gmat = g.reshape(bsz, cout, oh * ow)
        if w.requires_grad:
            gw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2]))
            w._accumulate(gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(gmat.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat)
            if one_by_one:
                x._accumulate(gcols.reshape(x.data.shape))
            else:
                x._accumulate(kernels.col2im(gcols, x.data.shape, kh, kw, stride, padding))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling of [B, C, H, W]."""
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.data.shape

    def bwd(g):
        x._accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(data, (x,), bwd)


def forward_backward(fn, inputs, seed=None):
    """Run `fn(*inputs)` and return (output, [gradient per input]).

    Inputs are Tensors; gradients are numpy arrays (None for inputs that do
    not require grad). Deterministic: same inputs give bit-identical results.
    """
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    out.backward(seed)
    return out, [t.grad.copy() if t.grad is not None else None for t in inputs]
