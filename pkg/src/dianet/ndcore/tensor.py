"""Dense tensor with a define-by-run tape for reverse-mode gradients.

Every op records its parents and a closure mapping the upstream gradient to
one gradient per parent. ``Tensor.backward`` walks the tape in reverse
topological order. Gradients accumulate into ``.grad`` until ``zero_grad``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32
COSINE_EPS = 1e-8


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """N-dimensional real array that can take part in gradient computation."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, _op=""):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        """Accumulate d(self)/d(t) into ``t.grad`` for every requires_grad tensor t."""
        if self.ndim != 0:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        upstream = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in upstream:
                    upstream[id(parent)] = upstream[id(parent)] + pg
                else:
                    upstream[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean_over_axis(self, axis)


def _lift(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    requires_grad = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=requires_grad,
        _parents=parents if requires_grad else (),
        _backward=backward if requires_grad else None,
        _op=op,
    )


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _lift(a, DEFAULT_DTYPE), _lift(b, a.dtype if isinstance(a, Tensor) else DEFAULT_DTYPE)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _lift(a, DEFAULT_DTYPE), _lift(b, DEFAULT_DTYPE)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, c):
    c = float(c)
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def dropout(a, p, training, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-p); identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- reductions / shape


def sum_(a, axis=None):
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean_over_axis(a, axis=None):
    out = np.mean(a.data, axis=axis)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a, start_dim=1):
    return reshape(a, a.shape[:start_dim] + (-1,))


def swapaxes(a, ax1=-1, ax2=-2):
    return _result(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def concat_lastdim(tensors):
    tensors = list(tensors)
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise ShapeError("concat_lastdim: leading shapes differ")
    out = np.concatenate([t.data for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _result(out, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast numpy-style."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def softmax_lastdim(a):
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax_lastdim(a):
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def cosine_similarity(u, v, eps=COSINE_EPS):
    """Cosine similarity along the last axis, each norm clamped below at ``eps``."""
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: shapes differ, {u.shape} vs {v.shape}")
    if u.shape[-1] < 1:
        raise ShapeError("cosine_similarity needs d >= 1")
    nu_raw = np.sqrt((u.data * u.data).sum(axis=-1, keepdims=True))
    nv_raw = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    nu, nv = np.maximum(nu_raw, eps), np.maximum(nv_raw, eps)
    dot = (u.data * v.data).sum(axis=-1, keepdims=True)
    cos = dot / (nu * nv)
    # rounding can push |cos| a few ulp past 1; the clip only ever triggers there
    cos_out = np.clip(cos, -1.0, 1.0)

    def backward(g):
        g = g[..., None]
        # the clamp makes the norm constant below eps, so its derivative drops out
        du = v.data / (nu * nv) - np.where(nu_raw > eps, cos * u.data / nu**2, 0)
        dv = u.data / (nu * nv) - np.where(nv_raw > eps, cos * v.data / nv**2, 0)
        return g * du, g * dv

    return _result(cos_out[..., 0], (u, v), backward, "cosine")


def conv2d(x, kernels, stride=1, pad=0):
    """2-D cross-correlation with zero padding.

    ``x`` is C x H x W or N x C x H x W; ``kernels`` is C_out x C_in x k x k.
    """
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {kernels.shape}")
    n, c, h, w = xd.shape
    c_out, c_in, k, k2 = kernels.shape
    if c_in != c or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if k > h + 2 * pad or k > w + 2 * pad or ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent for input {x.shape}, k={k}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: n, c, ho, wo, k, k  ->  cols: n, ho, wo, c*k*k
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)
    wmat = kernels.data.reshape(c_out, -1)
    out = np.matmul(cols, wmat.T).transpose(0, 3, 1, 2)

    def backward(g):
        g = g if batched else g[None]
        gcols = g.transpose(0, 2, 3, 1)  # n, ho, wo, c_out
        gk = np.tensordot(gcols, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(kernels.shape)
        dcols = np.matmul(gcols, wmat).reshape(n, ho, wo, c, k, k)
        gx = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        return (gx if batched else gx[0]), gk

    return _result(np.ascontiguousarray(out if batched else out[0]), (x, kernels), backward, "conv2d")


def avg_pool2d(x, size=2):
    """Non-overlapping average pooling over the last two axes; ragged edges are cropped."""
    h, w = x.shape[-2:]
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: input {x.shape} smaller than window {size}")
    cropped = x.data[..., : ho * size, : wo * size]
    lead = x.shape[:-2]
    out = cropped.reshape(lead + (ho, size, wo, size)).mean(axis=(-3, -1))

    def backward(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1) / (size * size)
        gx[..., : ho * size, : wo * size] = spread
        return (gx,)

    return _result(out, (x,), backward, "avg_pool2d")
