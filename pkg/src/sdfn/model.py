"""Whole-model glue: parameter initialisation and batched forward/loss."""

from __future__ import annotations

from typing import Mapping, Optional, Tuple

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import EncodedBatch
from .encoders import encode_image, encode_target, encode_text, init_image_encoder, init_text_encoder
from .losses import LossBreakdown, bbc_loss, l2_normalize, consistency_loss, spd_loss, total_loss
from .router import ForwardResult, forward_network, init_network, site_names
from .tensor import Tensor


def init_params(cfg: TrainConfig, vocab_size: int, seed: Optional[int] = None) -> dict:
    """Fresh parameters; every affine weight ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = init_image_encoder(rng, cfg.c_in, cfg.raw_width, cfg.dim, cfg.grid * cfg.grid)
    params.update(init_text_encoder(rng, vocab_size, cfg.dim))
    params.update(init_network(rng, cfg.dim, cfg.heads, cfg.ffn_width, cfg.n_layers, cfg.router, cfg.active_modules))
    return params


def n_sites(cfg: TrainConfig) -> int:
    return len(site_names(cfg.n_layers, cfg.active_modules))


def forward_queries(p: Mapping[str, Tensor], batch: EncodedBatch, cfg: TrainConfig, force_routing=None) -> ForwardResult:
    x_r = encode_image(batch.ref_images, p)
    tw, ts = encode_text(batch.tokens, p, mask=batch.mask)
    return forward_network(
        x_r, tw, ts, p, n_layers=cfg.n_layers, heads=cfg.heads, tau_r=cfg.tau_r, router=cfg.router,
        active=cfg.active_modules, key_mask=batch.mask, force_routing=force_routing,
    )


def compute_loss(
    p: Mapping[str, Tensor],
    batch: EncodedBatch,
    cfg: TrainConfig,
    teacher_logits: Optional[np.ndarray] = None,
    teacher_mask: Optional[np.ndarray] = None,
) -> Tuple[LossBreakdown, ForwardResult]:
    """Forward a training batch and assemble ``l_bbc + l_cons + lambda * l_path``.

    Terms switched off in ``cfg`` contribute a constant zero.  The path term
    is also zero when no teacher logits are given or none is unmasked.
    """
    res = forward_queries(p, batch, cfg)
    f_t = encode_target(batch.tgt_images, p)
    zero = T.Tensor(0.0)
    l_bbc = bbc_loss(res.f_q, f_t, cfg.bbc_scale) if cfg.use_bbc else zero
    if cfg.use_cons:
        feats = (res.f_q, f_t.detach() if cfg.cons_detach_target else f_t, res.f_in)
        if cfg.cons_normalize:
            # raw Grams are minimised by shrinking every feature to zero
            feats = tuple(l2_normalize(f) for f in feats)
        l_cons = consistency_loss(*feats)
    else:
        l_cons = zero
    use_path = cfg.use_spd and cfg.lam > 0 and teacher_logits is not None
    if use_path and teacher_mask is not None and not np.any(teacher_mask):
        use_path = False
    l_path = spd_loss(res.logits, teacher_logits, cfg.tau_path, teacher_mask) if use_path else zero
    lam = cfg.lam if cfg.use_spd else 0.0
    return total_loss(l_bbc, l_cons, l_path, lam, cfg.tau_path, len(batch)), res


def query_features(params: Mapping[str, np.ndarray], batch: EncodedBatch, cfg: TrainConfig,
                   chunk: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """Composed query features and routing probabilities, without keeping a graph."""
    p = {k: T.Tensor(v) for k, v in params.items()}
    feats, probs = [], []
    for start in range(0, len(batch), chunk):
        res = forward_queries(p, batch.subset(np.arange(start, min(start + chunk, len(batch)))), cfg)
        feats.append(res.f_q.data)
        probs.append(res.probs.data)
    return np.concatenate(feats), np.concatenate(probs)


def gallery_features(params: Mapping[str, np.ndarray], images: np.ndarray, chunk: int = 512) -> np.ndarray:
    p = {k: T.Tensor(v) for k, v in params.items()}
    return np.concatenate([encode_target(images[i:i + chunk], p).data for i in range(0, len(images), chunk)])
