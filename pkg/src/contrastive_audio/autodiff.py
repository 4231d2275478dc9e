"""Minimal dense-tensor reverse-mode autodiff on top of numpy.

Every op returns a new :class:`Tensor` holding references to its parents and a
closure that maps the output adjoint to parent adjoints. :func:`backward`
walks the graph once in reverse topological order. Graphs are single use: a
second ``backward`` on the same loss raises.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DisconnectedGraph, NotScalar, ShapeMismatch

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "grad_check",
    "matmul",
    "transpose",
    "add",
    "mul",
    "tanh",
    "relu",
    "conv2d",
    "avg_pool2d",
    "global_mean_pool",
    "reshape",
    "softmax_cross_entropy",
    "log_softmax",
    "scalar_mean",
    "tensor_sum",
    "set_default_dtype",
    "get_default_dtype",
]

_default_dtype = np.float64


def set_default_dtype(dtype):
    """Dtype used by :func:`tensor` when none is given (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(np.array(data, dtype=dtype or _default_dtype), requires_grad, name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, None, parents, backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------------ primitives


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), back)


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T, (a,), lambda g: (g.T,))


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), back)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), back)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def tensor_sum(a):
    a = _as_tensor(a)
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def scalar_mean(a):
    a = _as_tensor(a)
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def conv2d(x, w, b=None, stride=1):
    """Valid cross-correlation. ``x``: (N, C, H, W), ``w``: (O, C, kh, kw), ``b``: (O,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if kh > h or kw > wd:
        raise ShapeMismatch(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    if b is not None:
        b = _as_tensor(b, like=x)
        if b.shape != (o,):
            raise ShapeMismatch(f"conv2d: bias {b.shape} does not match {o} output channels")
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col: rows are output positions (n, i, j), columns (c, ki, kj)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gx = np.zeros(x.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j]
        grads = (gx, gw)
        if b is not None:
            grads += (g2.sum(axis=0),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _node(np.ascontiguousarray(out), parents, back)


def avg_pool2d(x, size=2):
    """Non-overlapping ``size``x``size`` mean pooling; trailing rows/cols that do not fill a window are dropped."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"avg_pool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"avg_pool2d: input {x.shape} smaller than pool size {size}")
    crop = x.data[:, :, :ho * size, :wo * size]
    out = crop.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def back(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        up = np.repeat(np.repeat(g / (size * size), size, axis=2), size, axis=3)
        gx[:, :, :ho * size, :wo * size] = up
        return (gx,)

    return _node(out, (x,), back)


def global_mean_pool(x):
    """(N, C, H, W) -> (N, C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"global_mean_pool expects (N, C, H, W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return _node(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Per-row ``-log softmax(logits)[target]``, shape (B,).

    Uses max-subtracted log-sum-exp so large logits do not overflow.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeMismatch(f"targets out of range [0, {logits.shape[1]})")
    logp = log_softmax(logits.data)
    rows = np.arange(targets.size)
    out = -logp[rows, targets]

    def back(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * g[:, None],)

    return _node(out, (logits,), back)


# -------------------------------------------------------------------- backward


def _topological(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Returns a dict mapping each such leaf tensor to its gradient.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise NotScalar(f"backward needs a scalar loss, got shape {shape}")
    if loss._consumed:
        raise RuntimeError("this graph was already differentiated; rebuild it (tapes are single use)")
    if not loss.requires_grad:
        raise DisconnectedGraph("loss does not depend on any tensor with requires_grad=True")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for node in order:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True
    return leaves


def grad_check(f, params, eps=1e-6, floor=1e-6, scale_floor=0.0):
    """Compare analytic gradients of ``f`` with central finite differences.

    ``f`` maps a list of tensors to a scalar tensor; ``params`` is a list of
    float64 arrays. Returns the max over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor, scale_floor * G)``
    where ``G`` is the largest analytic gradient magnitude of the same tensor.
    A nonzero ``scale_floor`` keeps coordinates whose gradient is far below
    the tensor's scale (and near the round-off of the differences) from
    dominating the maximum.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    if not params or all(p.size == 0 for p in params):
        return 0.0
    leaves = [Tensor(p.copy(), requires_grad=True) for p in params]
    backward(f(leaves))
    analytic = [np.zeros_like(p) if t.grad is None else t.grad for p, t in zip(params, leaves)]

    def value(k, idx, delta):
        probe = [p.copy() for p in params]
        probe[k][idx] += delta
        return f([Tensor(p) for p in probe]).item()

    worst = 0.0
    for k, p in enumerate(params):
        tensor_floor = max(floor, scale_floor * float(np.max(np.abs(analytic[k]), initial=0.0)))
        for idx in np.ndindex(p.shape):
            numeric = (value(k, idx, eps) - value(k, idx, -eps)) / (2 * eps)
            a = analytic[k][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), tensor_floor)
            worst = max(worst, err)
    return worst
