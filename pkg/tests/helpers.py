"""Seeded setups shared by the golden and gradient tests."""

import numpy as np

from sdfn.encoders import init_image_encoder, init_text_encoder
from sdfn.fusion import init_module
from sdfn.nn import init_attention, init_ffn
from sdfn.router import init_network


def mha_setup(seed=7, n=2, m=3, dim=4, heads=2):
    rng = np.random.default_rng(seed)
    p = init_attention(rng, dim, "a")
    q, k, v = rng.normal(size=(n, dim)), rng.normal(size=(m, dim)), rng.normal(size=(m, dim))
    return p, q, k, v, heads


def ffn_setup(seed=3, n=2, dim=4, hidden=16):
    rng = np.random.default_rng(seed)
    p = init_ffn(rng, dim, hidden, "f")
    return p, rng.normal(size=(n, dim))


def image_setup(seed=11, grid=2, c_in=4, dim=3):
    rng = np.random.default_rng(seed)
    p = init_image_encoder(rng, c_in, 2 * dim, dim, grid * grid)
    return p, rng.normal(size=(grid, grid, c_in))


def text_setup(seed=13, length=4, dim=3, vocab=10):
    rng = np.random.default_rng(seed)
    p = init_text_encoder(rng, vocab, dim)
    return p, rng.integers(0, vocab, size=length)


def module_setup(kind, seed, k=4, length=3, dim=8, heads=2):
    rng = np.random.default_rng(seed)
    p = init_module(kind, rng, dim, 4 * dim, f"m.{kind}")
    # non-trivial layer-norm affine so gain/bias enter the golden values
    for name in list(p):
        if name.endswith(".gain"):
            p[name] = 1.0 + 0.1 * rng.normal(size=dim)
        elif name.endswith(".bias"):
            p[name] = 0.1 * rng.normal(size=dim)
    x = rng.normal(size=(k, dim))
    tw = rng.normal(size=(length, dim))
    ts = tw.max(axis=0)
    return p, x, tw, ts, heads


def network_setup(seed=29, k=4, length=3, dim=8, heads=2, n_layers=3):
    rng = np.random.default_rng(seed)
    p = init_network(rng, dim, heads, 4 * dim, n_layers)
    x = rng.normal(size=(k, dim))
    tw = rng.normal(size=(length, dim))
    return p, x, tw, tw.max(axis=0), heads, n_layers
