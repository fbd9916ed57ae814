"""Dense float64 tensors with a build-then-backward reverse-mode tape.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the upstream gradient to parent gradients.  ``backward``
walks the graph once in reverse topological order.  Leaves created with a
``name`` are treated as parameters and show up in the returned gradient map.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .exceptions import NumericsError, ShapeError

GradientMap = dict  # name -> np.ndarray with the parameter's shape


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericsError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self):
        return len(self.data)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def parameter(data, name):
    """Leaf tensor whose gradient is reported under ``name``."""
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericsError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    live = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(live)
    out._parents = tuple(parents) if live else ()
    out._backward = backward if live else None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    """Square root; the gradient at exactly zero is defined as zero."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _make(out, (x,), bw, "sqrt")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
    return tuple(ax % ndim for ax in axes)


def _expand_reduced(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape
    return _make(np.asarray(out), (x,), lambda g: (_expand_reduced(g, shape, axes, keepdims).copy(),), "sum")


def mean(x, axis=None, keepdims=False):
    """Mean-pool; over ``axis`` or all entries."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = x.data.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean over empty axis of shape {x.shape}")
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape
    return _make(
        np.asarray(out), (x,), lambda g: (_expand_reduced(g / count, shape, axes, keepdims).copy(),), "mean"
    )


def max_(x, axis, keepdims=False):
    """Max-pool over one axis; ties route the gradient to the first maximiser."""
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    if x.shape[ax] == 0:
        raise ShapeError(f"max over empty axis of shape {x.shape}")
    idx = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def bw(g):
        full = np.zeros(x.shape)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(full, np.expand_dims(idx, ax), gk, axis=ax)
        return (full,)

    return _make(out, (x,), bw, "max")


# ----------------------------------------------------------------- structural


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def bw(g):
        a2 = a.data[None, :] if a.ndim == 1 else a.data
        b2 = b.data[:, None] if b.ndim == 1 else b.data
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if a.ndim == 1:
            ga = np.squeeze(ga, -2)
        if b.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1, a2):
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx):
    x = as_tensor(x)
    out = np.array(x.data[idx], dtype=np.float64)
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(x.shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), bw, "getitem")


def take_rows(table, indices):
    """Embedding lookup: ``table[indices]`` with scatter-add backward."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    out = table.data[indices]

    def bw(g):
        full = np.zeros(table.shape)
        np.add.at(full, indices, g)
        return (full,)

    return _make(out, (table,), bw, "take_rows")


def concat(tensors: Sequence, axis=-1):
    """Concatenate along ``axis`` (channel concatenation by default)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of zero tensors")
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, ts, bw, "stack")


def broadcast_to(x, shape):
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {x.shape} -> {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


# -------------------------------------------------------------------- backward


def _topo(root: Tensor):
    order, seen, stack_ = [], set(), [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, wrt: Optional[Mapping[str, Tensor]] = None) -> GradientMap:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a mapping from parameter name to gradient array.  Named leaves
    reached from ``loss`` are always included; entries of ``wrt`` that the
    loss does not depend on get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    out: GradientMap = {}
    if loss.requires_grad:
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.name is not None:
                    out[node.name] = out[node.name] + g if node.name in out else g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if wrt is not None:
        for name, t in wrt.items():
            if name not in out:
                out[name] = np.zeros(t.shape)
    return out


def leaves(params: Mapping[str, np.ndarray]) -> dict:
    """Wrap a flat parameter dict into named leaf tensors."""
    return {k: parameter(v, k) for k, v in params.items()}


def constant(data) -> Tensor:
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def tensors_of(xs: Iterable) -> list:
    return [as_tensor(x) for x in xs]
