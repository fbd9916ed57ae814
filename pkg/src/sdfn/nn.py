"""Shared neural building blocks on top of :mod:`sdfn.tensor`.

Softmax, log-softmax and layer normalisation are fused primitives with
closed-form backward rules; attention and the feed-forward block are
compositions.  Weight matrices are stored input-major, ``(fan_in, fan_out)``,
so a row-vector batch multiplies them on the right.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor, _make, as_tensor

LN_EPS = 1e-5
MASK_VALUE = -1e9


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def np_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def np_log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"layer_norm over empty last axis, shape {x.shape}")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------- parameters


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_attention(rng, dim, prefix):
    return {f"{prefix}.{w}": uniform_init(rng, dim, (dim, dim)) for w in ("w_q", "w_k", "w_v", "w_o")}


def init_ffn(rng, dim, hidden, prefix):
    return {
        f"{prefix}.w1": uniform_init(rng, dim, (dim, hidden)),
        f"{prefix}.b1": uniform_init(rng, dim, (hidden,)),
        f"{prefix}.w2": uniform_init(rng, hidden, (hidden, dim)),
        f"{prefix}.b2": uniform_init(rng, hidden, (dim,)),
    }


def init_layer_norm(dim, prefix):
    return {f"{prefix}.gain": np.ones(dim), f"{prefix}.bias": np.zeros(dim)}


@dataclass
class AttentionParams:
    """Projections for one attention block; all ``D x D``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    head_count: int

    def __post_init__(self):
        dim = self.w_q.shape[0]
        if self.head_count <= 0 or dim % self.head_count:
            raise ConfigError(f"head_count {self.head_count} does not divide model width {dim}")

    @classmethod
    def from_params(cls, p: Mapping[str, Tensor], prefix: str, head_count: int):
        return cls(p[f"{prefix}.w_q"], p[f"{prefix}.w_k"], p[f"{prefix}.w_v"], p[f"{prefix}.w_o"], head_count)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.reshape(T.transpose(x, axes), (*lead, n, h * dh))


def multi_head_attention(q, k, v, params: AttentionParams, key_mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over ``head_count`` heads plus output projection.

    ``q`` is ``(..., n, D)``; ``k`` and ``v`` are ``(..., m, D)``.  ``key_mask``
    (``(..., m)`` booleans, true = keep) removes padded keys.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    dim = params.w_q.shape[0]
    if q.shape[-1] != dim or k.shape[-1] != dim or v.shape[-1] != dim:
        raise ShapeError(f"attention width mismatch: q {q.shape}, k {k.shape}, v {v.shape}, D={dim}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention keys {k.shape} and values {v.shape} differ in length")
    if k.shape[-2] == 0:
        raise ShapeError("attention over zero keys")
    h = params.head_count
    qh = _split_heads(q @ params.w_q, h)
    kh = _split_heads(k @ params.w_k, h)
    vh = _split_heads(v @ params.w_v, h)
    scores = (qh @ T.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dim // h))
    if key_mask is not None:
        drop = ~np.asarray(key_mask, dtype=bool)
        # (..., m) -> (..., 1, 1, m) to reach every head and query row
        drop = drop.reshape(drop.shape[:-1] + (1, 1, drop.shape[-1]))
        scores = T.masked_fill(scores, drop, MASK_VALUE)
    weights = softmax(scores, axis=-1)
    return _merge_heads(weights @ vh) @ params.w_o


def feed_forward(x, w1, b1, w2, b2) -> Tensor:
    """Two affine maps with a ReLU in between; width is preserved."""
    return T.relu(as_tensor(x) @ w1 + b1) @ w2 + b2


def ffn_from(p: Mapping[str, Tensor], prefix: str, x) -> Tensor:
    return feed_forward(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"], p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def ln_from(p: Mapping[str, Tensor], prefix: str, x) -> Tensor:
    return layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"])
