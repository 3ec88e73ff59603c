"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and remembers the operations that produced it.
Calling ``backward()`` on a scalar (or any tensor, with an explicit output
gradient) walks the recorded graph in reverse topological order and
accumulates gradients into every leaf with ``requires_grad=True``.

Only the operations the encoder, adapter, and convolutional heads need are
provided; there is no general broadcasting beyond what those layers use.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate gradients of this tensor w.r.t. every reachable leaf."""
        if grad is None:
            if self.data.ndim != 0:
                raise ShapeError(
                    f"backward() without an explicit gradient requires a scalar, "
                    f"got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ShapeError(
                f"output gradient shape {grad.shape} does not match tensor "
                f"shape {self.data.shape}"
            )

        order = _toposort(self)
        _accumulate(self, grad)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root):
    """Reverse topological order (root first), iterative to spare the stack."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _accumulate(tensor, grad):
    if not tensor.requires_grad and tensor._backward is None:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def _node(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)

    def backward(g):
        _accumulate(x, g * c)

    return _node(x.data * c, (x,), backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), backward)


def tanh(x):
    x = _as_tensor(x)
    t = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - t * t))

    return _node(t, (x,), backward)


def gelu(x):
    """Gaussian error linear unit, tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + _GELU_C * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v * v)
        dx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        _accumulate(x, g * dx)

    return _node(out, (x,), backward)


def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old_shape = x.data.shape

    def backward(g):
        _accumulate(x, g.reshape(old_shape))

    return _node(x.data.reshape(shape), (x,), backward)


def transpose(x, axes=None):
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(x, g.transpose(inv))

    return _node(x.data.transpose(axes), (x,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        )
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node(data, tuple(tensors), backward)


def split(x, sizes, axis=0):
    """Split along ``axis`` into chunks of the given sizes."""
    x = _as_tensor(x)
    if sum(sizes) != x.data.shape[axis]:
        raise ShapeError(
            f"split: sizes {sizes} do not sum to axis length "
            f"{x.data.shape[axis]} of shape {x.shape}"
        )
    outs = []
    lo = 0
    for size in sizes:
        hi = lo + size
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(lo, hi)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            _accumulate(x, full)

        outs.append(_node(x.data[idx], (x,), backward))
        lo = hi
    return outs


def sum_all(x):
    x = _as_tensor(x)

    def backward(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    return _node(x.data.sum(), (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(data, (a, b), backward)


def softmax(x, axis):
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _node(y, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    h = x.data.shape[-1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({h},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)  # population variance
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)

    return _node(out, (x, gain, bias), backward)


def conv1d(x, filters, padding):
    """Cross-correlation of x [L, C] with filters [K, w, C] -> [L', K].

    ``padding`` is "same" (zero padded, extra pad on the right for even
    widths, L' = L) or "valid" (L' = L - w + 1).
    """
    x, filters = _as_tensor(x), _as_tensor(filters)
    if x.data.ndim != 2 or filters.data.ndim != 3:
        raise ShapeError(
            f"conv1d: expected x [L,C] and filters [K,w,C], got {x.shape} and "
            f"{filters.shape}"
        )
    length, channels = x.data.shape
    n_filters, width, f_channels = filters.data.shape
    if channels != f_channels:
        raise ShapeError(
            f"conv1d: channel mismatch, x has {channels}, filters have {f_channels}"
        )
    if padding == "same":
        pad_left = (width - 1) // 2
        pad_right = width - 1 - pad_left
    elif padding == "valid":
        if width > length:
            raise ShapeError(
                f"conv1d: filter width {width} exceeds length {length} with "
                f"valid padding"
            )
        pad_left = pad_right = 0
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")

    xp = np.pad(x.data, ((pad_left, pad_right), (0, 0)))
    out_len = xp.shape[0] - width + 1
    # accumulate tap by tap in (offset, channel) order; this keeps the
    # summation order identical to a naive sliding-window loop, so results
    # are reproducible bit-for-bit against simple reference code
    data = np.zeros((out_len, n_filters))
    for j in range(width):
        for c in range(channels):
            data += np.outer(xp[j:j + out_len, c], filters.data[:, j, c])
    flat_filters = filters.data.reshape(n_filters, width * channels)

    def backward(g):
        windows = np.lib.stride_tricks.sliding_window_view(xp, (width, channels))
        windows = windows.reshape(out_len, width * channels)
        _accumulate(filters, (g.T @ windows).reshape(filters.data.shape))
        gwin = (g @ flat_filters).reshape(out_len, width, channels)
        gxp = np.zeros_like(xp)
        for j in range(width):
            gxp[j:j + out_len] += gwin[:, j, :]
        _accumulate(x, gxp[pad_left:pad_left + length])

    return _node(data, (x, filters), backward)


def max_reduce(x, axis=0):
    """Columnwise maximum over ``axis``; gradient goes to the first argmax."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"max_reduce: expected a 2-d input, got {x.shape}")
    idx = x.data.argmax(axis=axis)  # first maximal index on ties
    data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    data = data.squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        if axis == 0:
            gx[idx, np.arange(x.data.shape[1])] = g
        else:
            gx[np.arange(x.data.shape[0]), idx] = g
        _accumulate(x, gx)

    return _node(data, (x,), backward)


def sum_reduce(x, axis=0):
    """Sum over ``axis`` of a 2-d input (alternate length reduction)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"sum_reduce: expected a 2-d input, got {x.shape}")

    def backward(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _node(x.data.sum(axis=axis), (x,), backward)


def embedding_lookup(table, ids):
    """Gather rows of table [V, H] at integer positions ids [L] -> [L, H]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or table.data.ndim != 2:
        raise ShapeError(
            f"embedding_lookup: expected table [V,H] and ids [L], got "
            f"{table.shape} and {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range [0, {table.data.shape[0]})"
        )

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _node(table.data[ids], (table,), backward)


def cross_entropy_from_logits(logits, target_index):
    """Negative log softmax probability of ``target_index``; scalar output."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy: expected 1-d logits, got {logits.shape}")
    n = logits.data.shape[0]
    target_index = int(target_index)
    if not 0 <= target_index < n:
        raise IndexError(f"cross_entropy: target {target_index} out of range [0, {n})")
    m = logits.data.max()
    lse = m + math.log(np.exp(logits.data - m).sum())
    loss = lse - logits.data[target_index]

    def backward(g):
        p = np.exp(logits.data - lse)
        p[target_index] -= 1.0
        _accumulate(logits, float(g) * p)

    return _node(loss, (logits,), backward)
