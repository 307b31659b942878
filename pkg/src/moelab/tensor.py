"""Reverse-mode autodiff on float64 numpy arrays.

Design rules, in order: correctness, determinism, readability. Every tensor
is float64, every op has a hand-written backward, and any NaN or Inf in an
op's output raises immediately instead of propagating. The engine supports
exactly what a small mixture-of-experts transformer needs; it is not a
general array library.

Gradients accumulate by summation over all uses of a value. backward() walks
the graph once in reverse topological order, so each op's backward runs
exactly once per call.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    """A float64 array plus the graph bookkeeping needed for backward()."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the actual math lives in the module-level functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self):
        """Backpropagate from a scalar seed (grad 1.0) through the graph."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar seed, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t, g):
    if not t.requires_grad and t._backward is None:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), backward, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), backward, "mul")


def matmul(a, b):
    """Matrix product: plain 2-D, or stacked with identical leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims must match exactly: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _from_op(data, (a, b), backward, "matmul")


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(old))

    return _from_op(data, (x,), backward, "reshape")


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _from_op(data, (x,), backward, "transpose")


def narrow(x, axis, start, size):
    """Contiguous slice [start, start+size) along one axis."""
    x = _as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)
    data = x.data[index].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)

    return _from_op(data, (x,), backward, "narrow")


def concat(parts, axis):
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + n)
            _accumulate(p, g[tuple(index)])
            offset += n

    return _from_op(data, tuple(parts), backward, "concat")


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _from_op(data, (x,), backward, "sum")


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x, axis=-1):
    """Numerically stable softmax along one axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - inner) * data)

    return _from_op(data, (x,), backward, "softmax")


def logsumexp(x, axis=-1):
    """Stable log-sum-exp reduction along one axis."""
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)

    def backward(g):
        _accumulate(x, np.expand_dims(g, axis) * (e / s))

    return _from_op(data, (x,), backward, "logsumexp")


def rms_norm(x, gain, eps=1e-6):
    """Root-mean-square normalization over the last axis, with learned gain."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ValueError(f"gain shape {gain.shape} does not match last axis of {x.shape}")
    n = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    data = x.data * inv * gain.data

    def backward(g):
        gg = g * gain.data
        inner = (gg * x.data).sum(axis=-1, keepdims=True)
        _accumulate(x, gg * inv - x.data * (inv ** 3) * inner / n)
        axes = tuple(range(x.ndim - 1))
        _accumulate(gain, (g * x.data * inv).sum(axis=axes))

    return _from_op(data, (x, gain), backward, "rms_norm")


def glu(a, b):
    """Gated linear unit: silu(a) * b, the FFN nonlinearity."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"glu operands must match: {a.shape} vs {b.shape}")
    sig = 1.0 / (1.0 + np.exp(-a.data))
    silu = a.data * sig
    data = silu * b.data

    def backward(g):
        _accumulate(a, g * b.data * sig * (1.0 + a.data * (1.0 - sig)))
        _accumulate(b, g * silu)

    return _from_op(data, (a, b), backward, "glu")


def cross_entropy(logits, targets):
    """Mean cross-entropy of integer targets under row-wise softmax.

    logits: (T, V), targets: (T,) ints in [0, V). Uses the log-sum-exp form,
    so no probability is materialized below float precision.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    t, v = logits.shape
    if targets.shape != (t,):
        raise ValueError(f"targets shape {targets.shape} does not match {t} rows")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target ids outside [0, {v})")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(t)
    data = np.float64((lse - logits.data[rows, targets]).mean())

    def backward(g):
        p = e / s
        p[rows, targets] -= 1.0
        _accumulate(logits, p * (g / t))

    return _from_op(data, (logits,), backward, "cross_entropy")


def embedding(weight, ids):
    """Row lookup with scatter-add gradient: out[i] = weight[ids[i]]."""
    return take_rows(weight, ids)


def take_rows(x, ids):
    """Differentiable row gather from a 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"take_rows expects a 2-D tensor, got {x.shape}")
    # np.nonzero on 2-D input yields strided views; the kernel wants C-contiguous int64.
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"take_rows expects 1-D ids, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[0]):
        raise IndexError(f"row ids outside [0, {x.shape[0]})")
    data = x.data[ids]

    def backward(g):
        full = np.zeros(x.shape)
        backend.kernels.scatter_add_rows(full, ids, np.ascontiguousarray(g))
        _accumulate(x, full)

    return _from_op(data, (x,), backward, "take_rows")


def scatter_rows(values, ids, num_rows):
    """Inverse of take_rows: out[ids[i]] += values[i], zeros elsewhere."""
    values = _as_tensor(values)
    if values.ndim != 2:
        raise ValueError(f"scatter_rows expects 2-D values, got {values.shape}")
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if ids.shape != (values.shape[0],):
        raise ValueError(f"ids shape {ids.shape} does not match {values.shape[0]} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= num_rows):
        raise IndexError(f"row ids outside [0, {num_rows})")
    data = np.zeros((num_rows, values.shape[1]))
    backend.kernels.scatter_add_rows(data, ids, np.ascontiguousarray(values.data))

    def backward(g):
        _accumulate(values, g[ids])

    return _from_op(data, (values,), backward, "scatter_rows")


def take_along_last(x, idx):
    """Differentiable gather along the last axis of a 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"take_along_last expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"index shape {idx.shape} does not match rows of {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"column ids outside [0, {x.shape[1]})")
    data = np.take_along_axis(x.data, idx, axis=1)
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
        _accumulate(x, full)

    return _from_op(data, (x,), backward, "take_along_last")


def top_k(values, k):
    """Top-k selection (not differentiable): indices plus a plain value copy.

    Works on a 1-D or 2-D Tensor or ndarray. Results are ordered by
    descending value; exact ties resolve to the lower index, so the outcome
    is deterministic for any input.
    """
    data = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    squeeze = data.ndim == 1
    if squeeze:
        data = data[None, :]
    if data.ndim != 2:
        raise ValueError(f"top_k expects 1-D or 2-D values, got {data.shape}")
    if not 1 <= k <= data.shape[1]:
        raise ValueError(f"k={k} outside [1, {data.shape[1]}]")
    idx, vals = backend.kernels.topk_rows(np.ascontiguousarray(data), k)
    if squeeze:
        return idx[0], vals[0]
    return idx, vals


_MASK_VALUE = -1e30  # finite stand-in for -inf; exp() underflows it to exactly 0


def causal_attention(q, k, v):
    """Scaled dot-product attention with a causal mask.

    q, k, v: (..., T, d) with identical leading dims. Position i attends to
    positions <= i only.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    t, d = q.shape[-2], q.shape[-1]
    scores = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                 1.0 / math.sqrt(d))
    mask = np.where(np.triu(np.ones((t, t), dtype=bool), k=1), _MASK_VALUE, 0.0)
    weights = softmax(add(scores, Tensor(mask)), axis=-1)
    return matmul(weights, v)
