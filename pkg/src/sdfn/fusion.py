"""The four image-text operation modules.

Each maps routed image features ``X`` of shape ``(..., K, D)`` plus the
text features to a ``(..., K, D)`` output.  Parameters live under
``<prefix>.<module>`` and are never shared between modules or layers.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .exceptions import ShapeError
from .nn import (
    AttentionParams,
    ffn_from,
    init_attention,
    init_ffn,
    init_layer_norm,
    ln_from,
    multi_head_attention,
    uniform_init,
)
from .tensor import Tensor


def init_jrm(rng, dim, ffn_hidden, prefix):
    out = {f"{prefix}.w_cat": uniform_init(rng, 2 * dim, (2 * dim, dim))}
    out.update(init_attention(rng, dim, f"{prefix}.attn"))
    out.update(init_ffn(rng, dim, ffn_hidden, f"{prefix}.ffn"))
    return out


def init_cam(rng, dim, prefix):
    out = init_attention(rng, dim, f"{prefix}.attn")
    out.update(init_layer_norm(dim, f"{prefix}.ln"))
    return out


def init_gtm(rng, dim, prefix):
    out = {
        f"{prefix}.w_alpha": uniform_init(rng, dim, (dim, dim)),
        f"{prefix}.w_beta": uniform_init(rng, dim, (dim, dim)),
    }
    out.update(init_layer_norm(dim, f"{prefix}.ln"))
    return out


def init_rcm(rng, dim, prefix):
    return init_layer_norm(dim, f"{prefix}.ln")


def init_module(kind, rng, dim, ffn_hidden, prefix):
    if kind == "jrm":
        return init_jrm(rng, dim, ffn_hidden, prefix)
    if kind == "cam":
        return init_cam(rng, dim, prefix)
    if kind == "gtm":
        return init_gtm(rng, dim, prefix)
    if kind == "rcm":
        return init_rcm(rng, dim, prefix)
    raise ValueError(f"unknown module kind {kind!r}")


def _as_row(ts: Tensor, dim: int) -> Tensor:
    if ts.shape[-1] != dim:
        raise ShapeError(f"sentence feature {ts.shape} does not match width {dim}")
    return T.reshape(ts, ts.shape[:-1] + (1, dim))


def jrm(x, ts, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Joint reasoning: channel-concat the sentence feature onto every position,
    reduce with ``w_cat``, self-attend over positions, then a residual FFN."""
    x, ts = T.as_tensor(x), T.as_tensor(ts)
    dim = x.shape[-1]
    row = T.broadcast_to(_as_row(ts, dim), x.shape)
    x_cat = T.concat([x, row], axis=-1) @ p[f"{prefix}.w_cat"]
    attn = AttentionParams.from_params(p, f"{prefix}.attn", heads)
    x_att = multi_head_attention(x_cat, x_cat, x_cat, attn)
    return ffn_from(p, f"{prefix}.ffn", x_att) + x_att


def cam(x, tw, p: Mapping[str, Tensor], prefix: str, heads: int, key_mask=None) -> Tensor:
    """Cross attention: image positions query the word features."""
    x, tw = T.as_tensor(x), T.as_tensor(tw)
    if tw.ndim < 2 or tw.shape[-2] == 0:
        raise ShapeError(f"cross attention needs at least one word, got {tw.shape}")
    attn = AttentionParams.from_params(p, f"{prefix}.attn", heads)
    return ln_from(p, f"{prefix}.ln", multi_head_attention(x, tw, tw, attn, key_mask=key_mask))


def gtm(x, ts, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Global transformation: per-channel scale and shift predicted from the sentence."""
    x, ts = T.as_tensor(x), T.as_tensor(ts)
    dim = x.shape[-1]
    alpha = _as_row(ts @ p[f"{prefix}.w_alpha"], dim)
    beta = _as_row(ts @ p[f"{prefix}.w_beta"], dim)
    return ln_from(p, f"{prefix}.ln", alpha * x + beta)


def rcm(x, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return ln_from(p, f"{prefix}.ln", x)


def apply_module(kind, x, tw, ts, p, prefix, heads, key_mask=None) -> Tensor:
    if kind == "jrm":
        return jrm(x, ts, p, prefix, heads)
    if kind == "cam":
        return cam(x, tw, p, prefix, heads, key_mask)
    if kind == "gtm":
        return gtm(x, ts, p, prefix)
    if kind == "rcm":
        return rcm(x, p, prefix)
    raise ValueError(f"unknown module kind {kind!r}")
