"""scikit-learn style wrapper around training and retrieval.

``X`` is always a sequence of :class:`~sdfn.data.TripletRecord`; galleries
are sequences of attribute vectors from the same item universe.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .data import (
    ItemUniverse,
    TripletRecord,
    dataset_from_records,
    encode_records,
    generate_world,
    render_gallery,
)
from .exceptions import EvalError, ShapeError, VocabError
from .model import gallery_features, query_features
from .training import cosine_sims, recall_at_k, run_training


class SDFNRetriever(BaseEstimator):
    """Composed-query retriever trained with the routed fusion network.

    Constructor arguments mirror the :class:`~sdfn.config.TrainConfig` fields
    of the same name.  ``universe`` fixes the item world; when omitted, the
    world is regenerated from ``seed`` and the data-shape arguments.
    """

    def __init__(self, epochs=30, batch_size=16, lr=2e-3, weight_decay=1e-6, lr_decay_epoch=25,
                 lr_decay_factor=0.1, lam=0.6, tau_path=2.0, bbc_scale=30.0, use_cons=True, use_spd=True,
                 dim=32, heads=4, n_layers=3, router="msr", disabled_modules=(), n_attrs=4, n_values=6,
                 grid=4, c_in=8, noise=0.05, seed=42, universe: Optional[ItemUniverse] = None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_decay_epoch = lr_decay_epoch
        self.lr_decay_factor = lr_decay_factor
        self.lam = lam
        self.tau_path = tau_path
        self.bbc_scale = bbc_scale
        self.use_cons = use_cons
        self.use_spd = use_spd
        self.dim = dim
        self.heads = heads
        self.n_layers = n_layers
        self.router = router
        self.disabled_modules = disabled_modules
        self.n_attrs = n_attrs
        self.n_values = n_values
        self.grid = grid
        self.c_in = c_in
        self.noise = noise
        self.seed = seed
        self.universe = universe

    def _config(self) -> TrainConfig:
        fields = {k: v for k, v in self.get_params().items() if k != "universe"}
        fields["disabled_modules"] = tuple(fields["disabled_modules"])
        if self.universe is not None:
            u = self.universe
            fields.update(n_attrs=u.n_attrs, n_values=u.n_values, grid=u.grid, c_in=u.c_in)
        return TrainConfig(**fields)

    def _check_records(self, X, universe: ItemUniverse):
        records = list(X) if X is not None else []
        if not records:
            raise ValueError("expected a non-empty sequence of TripletRecord")
        for rec in records:
            if not isinstance(rec, TripletRecord):
                raise TypeError(f"expected TripletRecord, got {type(rec).__name__}")
            if len(rec.reference) != universe.n_attrs or len(rec.target) != universe.n_attrs:
                raise ShapeError(f"{rec.query_id}: items must have {universe.n_attrs} attributes")
            if not rec.tokens:
                raise VocabError(f"{rec.query_id}: empty modification text")
            if max(rec.tokens) >= universe.vocab_size or min(rec.tokens) < 0:
                raise VocabError(f"{rec.query_id}: token outside vocabulary of size {universe.vocab_size}")
        return records

    def _check_gallery(self, gallery, universe: ItemUniverse):
        items = [tuple(int(v) for v in g) for g in gallery]
        if not items:
            raise ValueError("gallery is empty")
        if any(len(g) != universe.n_attrs for g in items):
            raise ShapeError(f"gallery items must have {universe.n_attrs} attributes")
        return items

    def fit(self, X: Sequence[TripletRecord], y=None):
        cfg = self._config()
        universe = self.universe or generate_world(cfg.seed, cfg.n_attrs, cfg.n_values, cfg.grid, cfg.c_in)
        records = self._check_records(X, universe)
        data = dataset_from_records(cfg, universe, records, [], [])
        params, log, _ = run_training(cfg, data)
        self.config_ = cfg
        self.universe_ = universe
        self.params_ = params
        self.history_ = log
        return self

    def transform(self, X: Sequence[TripletRecord]) -> np.ndarray:
        """Composed query features, ``(n, dim)``."""
        check_is_fitted(self, "params_")
        records = self._check_records(X, self.universe_)
        batch = encode_records(records, self.universe_, self.config_.noise, self.config_.seed, 1, with_targets=False)
        return query_features(self.params_, batch, self.config_)[0]

    def embed_gallery(self, gallery) -> np.ndarray:
        check_is_fitted(self, "params_")
        items = self._check_gallery(gallery, self.universe_)
        return gallery_features(self.params_, render_gallery(items, self.universe_, self.config_.noise,
                                                            self.config_.seed))

    def predict(self, X: Sequence[TripletRecord], gallery) -> np.ndarray:
        """Index of the best-matching gallery item per query (ties to the lower index)."""
        sims = cosine_sims(self.transform(X), self.embed_gallery(gallery))
        return np.argmax(sims, axis=1)

    def score(self, X: Sequence[TripletRecord], gallery, k: int = 1) -> float:
        """Recall@k of the records' targets within ``gallery``."""
        check_is_fitted(self, "params_")
        items = self._check_gallery(gallery, self.universe_)
        lookup = {g: i for i, g in enumerate(items)}
        records = list(X)
        missing = [r.query_id for r in records if tuple(r.target) not in lookup]
        if missing:
            raise EvalError(f"targets of {missing[:3]} are not in the gallery")
        sims = cosine_sims(self.transform(records), self.embed_gallery(items))
        return recall_at_k(sims, [lookup[tuple(r.target)] for r in records], ks=(k,))[f"R{k}"]

