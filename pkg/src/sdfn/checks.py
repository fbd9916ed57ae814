"""Finite-difference gradient suite over every differentiable component.

Tiny dims throughout: D=8, K=4 (a 2x2 grid), L=3 words, B=2.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Tuple

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import EncodedBatch
from .encoders import encode_image, encode_target, encode_text, init_image_encoder, init_text_encoder
from .fusion import apply_module, init_module
from .gradcheck import GradCheckReport, finite_diff_check
from .losses import bbc_loss, consistency_loss, spd_loss
from .model import compute_loss, init_params, n_sites
from .router import init_router_head, route_probs

DIM, K, LENGTH, BATCH, HEADS, VOCAB, C_IN = 8, 4, 3, 2, 2, 10, 4
GRID = 2

Case = Tuple[Callable, Dict[str, np.ndarray], dict]


def _mask():
    return np.array([[True, True, True], [True, True, False]])


def _image_case(rng) -> Case:
    p = init_image_encoder(rng, C_IN, 2 * DIM, DIM, K)
    imgs = rng.normal(size=(BATCH, GRID, GRID, C_IN))
    c = rng.normal(size=(BATCH, K, DIM))
    return (lambda t: T.sum_(encode_image(imgs, t) * c) + T.sum_(encode_target(imgs, t) * c[:, 0])), p, {}


def _text_case(rng) -> Case:
    p = init_text_encoder(rng, VOCAB, DIM)
    tokens = rng.integers(1, VOCAB, size=(BATCH, LENGTH))
    cw, cs = rng.normal(size=(BATCH, LENGTH, DIM)), rng.normal(size=(BATCH, DIM))

    def f(t):
        tw, ts = encode_text(tokens, t, mask=_mask())
        return T.sum_(tw * cw) + T.sum_(ts * cs)

    return f, p, {}


def _module_case(kind):
    def build(rng) -> Case:
        p = init_module(kind, rng, DIM, 4 * DIM, kind)
        for name in p:
            if name.endswith(".gain"):
                p[name] = 1.0 + 0.1 * rng.normal(size=DIM)
            elif name.endswith(".bias"):
                p[name] = 0.1 * rng.normal(size=DIM)
        tw = rng.normal(size=(BATCH, LENGTH, DIM))
        params = dict(p, x=rng.normal(size=(BATCH, K, DIM)), tw=tw, ts=tw.max(axis=1))
        c = rng.normal(size=(BATCH, K, DIM))
        return (lambda t: T.sum_(apply_module(kind, t["x"], t["tw"], t["ts"], t, kind, HEADS, _mask()) * c)), params, {}
    return build


def _router_case(kind):
    def build(rng) -> Case:
        p = init_router_head(rng, DIM, kind, 4, "r")
        params = dict(p, pooled=rng.normal(size=(BATCH, DIM)), ts=rng.normal(size=(BATCH, DIM)))
        c = rng.normal(size=(BATCH, 4))
        return (lambda t: T.sum_(route_probs(t["pooled"], t["ts"], t, "r", kind)[0] * c)), params, {}
    return build


def _bbc_case(rng) -> Case:
    return (lambda t: bbc_loss(t["f_q"], t["f_t"])), {k: rng.normal(size=(BATCH, DIM)) for k in ("f_q", "f_t")}, {}


def _cons_case(rng) -> Case:
    params = {k: rng.normal(size=(BATCH, DIM)) for k in ("f_q", "f_t", "f_in")}
    return (lambda t: consistency_loss(t["f_q"], t["f_t"], t["f_in"])), params, {}


def _spd_case(rng) -> Case:
    teacher = rng.normal(size=(BATCH, 9, 4))
    return (lambda t: spd_loss(t["s"], teacher, 2.0)), {"s": rng.normal(size=(BATCH, 9, 4))}, {}


def tiny_config(**changes) -> TrainConfig:
    base = dict(dim=DIM, heads=HEADS, n_layers=3, grid=GRID, c_in=C_IN, n_attrs=2, n_values=3, max_edits=1,
                gallery_size=9, n_eval=8, n_train=8, batch_size=BATCH)
    base.update(changes)
    return TrainConfig(**base)


def _composite_case(rng) -> Case:
    # the stop-gradient on the target Gram is a training choice, not part of the
    # objective; finite differences can only see the literal objective
    cfg = tiny_config(seed=int(rng.integers(1 << 30)), cons_detach_target=False)
    params = init_params(cfg, VOCAB)
    tokens = rng.integers(1, VOCAB, size=(BATCH, LENGTH))
    batch = EncodedBatch(["a", "b"], rng.normal(size=(BATCH, GRID, GRID, C_IN)), tokens, _mask(),
                         rng.normal(size=(BATCH, GRID, GRID, C_IN)))
    teacher = rng.normal(size=(BATCH, n_sites(cfg), 4))
    mask = np.array([True, True])
    return (lambda t: compute_loss(t, batch, cfg, teacher, mask)[0].tensor), params, {"max_coords": 6}


CASES = {
    "image_encoder": _image_case,
    "text_encoder": _text_case,
    "jrm": _module_case("jrm"),
    "cam": _module_case("cam"),
    "gtm": _module_case("gtm"),
    "rcm": _module_case("rcm"),
    "router_msr": _router_case("msr"),
    "router_sr": _router_case("sr"),
    "bbc_loss": _bbc_case,
    "consistency_loss": _cons_case,
    "spd_loss": _spd_case,
    "composite": _composite_case,
}


def run_suite(seeds: Iterable[int] = range(5), h: float = 1e-4, tol: float = 1e-4,
              names: Iterable[str] = tuple(CASES)) -> Dict[Tuple[str, int], GradCheckReport]:
    """One report per (component, seed)."""
    out = {}
    for name in names:
        for seed in seeds:
            rng = np.random.default_rng([seed, list(CASES).index(name)])
            f, params, opts = CASES[name](rng)
            out[(name, seed)] = finite_diff_check(f, params, h=h, tol=tol, rng=np.random.default_rng(seed), **opts)
    return out
