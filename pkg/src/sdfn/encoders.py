"""Toy image and text encoders.

The image encoder stands in for a CNN backbone followed by a 1x1 reduction:
a per-position two-layer ReLU stack to ``raw_dim`` channels, then a linear
per-position projection down to ``dim``, flattened to ``K = H * W`` rows.
The first layer carries a learned bias per grid position so pooled target
features can tell which cell held which value.  Target features are the
mean over the ``K`` rows, computed with the same parameters.

The text encoder is a word embedding followed by a single LSTM layer; the
per-step hidden states are the word features and their elementwise max is
the sentence feature.
"""

from __future__ import annotations

from typing import Mapping, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, VocabError
from .nn import MASK_VALUE, uniform_init
from .tensor import Tensor


def init_image_encoder(rng, c_in: int, raw_dim: int, dim: int, n_positions: int, prefix: str = "img") -> dict:
    return {
        f"{prefix}.w1": uniform_init(rng, c_in, (c_in, raw_dim)),
        f"{prefix}.pos": uniform_init(rng, c_in, (n_positions, raw_dim)),
        f"{prefix}.w2": uniform_init(rng, raw_dim, (raw_dim, raw_dim)),
        f"{prefix}.b2": uniform_init(rng, raw_dim, (raw_dim,)),
        f"{prefix}.proj": uniform_init(rng, raw_dim, (raw_dim, dim)),
    }


def init_text_encoder(rng, vocab_size: int, dim: int, prefix: str = "txt") -> dict:
    return {
        f"{prefix}.embed": rng.uniform(-1.0, 1.0, size=(vocab_size, dim)),
        f"{prefix}.w": uniform_init(rng, 2 * dim, (2 * dim, 4 * dim)),
        f"{prefix}.b": uniform_init(rng, 2 * dim, (4 * dim,)),
    }


def encode_image(images, p: Mapping[str, Tensor], prefix: str = "img") -> Tensor:
    """``(..., H, W, C_in)`` raw grids to ``(..., K, D)`` spatial features."""
    x = T.as_tensor(images)
    w1, pos = p[f"{prefix}.w1"], p[f"{prefix}.pos"]
    if x.ndim < 3 or x.shape[-1] != w1.shape[0]:
        raise ConfigError(f"image channels {x.shape[-1:]} do not match encoder input width {w1.shape[0]}")
    k = x.shape[-3] * x.shape[-2]
    if k != pos.shape[0]:
        raise ConfigError(f"image has {k} positions, encoder was built for {pos.shape[0]}")
    x = T.reshape(x, x.shape[:-3] + (k, x.shape[-1]))
    h = T.relu(x @ w1 + pos)
    h = T.relu(h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"])
    return h @ p[f"{prefix}.proj"]


def encode_target(images, p: Mapping[str, Tensor], prefix: str = "img") -> Tensor:
    """Average-pooled image feature, ``(..., D)``."""
    return T.mean(encode_image(images, p, prefix), axis=-2)


def _check_vocab(tokens: np.ndarray, vocab_size: int):
    bad = (tokens < 0) | (tokens >= vocab_size)
    if bad.any():
        raise VocabError(f"token index {int(tokens[bad][0])} outside vocabulary of size {vocab_size}")


def encode_text(tokens, p: Mapping[str, Tensor], mask=None, prefix: str = "txt") -> Tuple[Tensor, Tensor]:
    """Word features ``(..., L, D)`` and max-pooled sentence feature ``(..., D)``.

    ``mask`` marks real tokens in a padded batch; padded steps carry the
    previous state forward and are excluded from the max-pool.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    embed, w, b = p[f"{prefix}.embed"], p[f"{prefix}.w"], p[f"{prefix}.b"]
    if tokens.shape[-1] == 0:
        raise VocabError("empty token sequence")
    _check_vocab(tokens, embed.shape[0])
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None]
    bsz, length = tokens.shape
    dim = embed.shape[1]
    xs = T.take_rows(embed, tokens)  # (B, L, D)
    h = T.zeros((bsz, dim))
    c = T.zeros((bsz, dim))
    states = []
    for t in range(length):
        z = T.concat([xs[:, t, :], h], axis=-1) @ w + b
        i = T.sigmoid(z[:, :dim])
        f = T.sigmoid(z[:, dim:2 * dim])
        g = T.tanh(z[:, 2 * dim:3 * dim])
        o = T.sigmoid(z[:, 3 * dim:])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        if mask is not None and not mask[:, t].all():
            keep = mask[:, t:t + 1].astype(np.float64)
            c_new = c_new * keep + c * (1.0 - keep)
            h_new = h_new * keep + h * (1.0 - keep)
        h, c = h_new, c_new
        states.append(h)
    words = T.stack(states, axis=1)
    pooled = words if mask is None else T.masked_fill(words, ~np.asarray(mask, dtype=bool)[..., None], MASK_VALUE)
    sentence = T.max_(pooled, axis=1)
    if single:
        return words[0], sentence[0]
    return words, sentence
