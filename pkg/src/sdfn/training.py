"""Optimisation loop, teacher path bank, path churn and recall evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import Dataset, EncodedBatch, build_dataset
from .exceptions import ChurnUndefined, EvalError, InvariantError, NumericsError
from .model import compute_loss, gallery_features, init_params, n_sites, query_features
from .router import site_names

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
RECALL_KS = (1, 10, 50)


# ------------------------------------------------------------------ optimiser


class Adam:
    """Adam with decoupled weight decay, updating parameter arrays in place."""

    def __init__(self, params: Mapping[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- path bank


@dataclass
class PathBank:
    """Routing logits per query id from the previous epoch (the distillation teacher)."""

    logits: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0

    def __len__(self):
        return len(self.logits)

    def lookup(self, query_ids: Sequence[str], shape: Tuple[int, int]):
        """Teacher logits ``(B, *shape)`` and a mask of queries present in the bank."""
        out = np.zeros((len(query_ids),) + tuple(shape))
        mask = np.zeros(len(query_ids), dtype=bool)
        for i, q in enumerate(query_ids):
            rec = self.logits.get(q)
            if rec is not None:
                if rec.size != out[i].size:
                    raise InvariantError(f"bank entry for {q} has {rec.size} logits, expected {out[i].size}")
                out[i] = rec.reshape(shape)
                mask[i] = True
        return out, mask


def update_teacher_bank(bank: PathBank, records: Mapping[str, np.ndarray]) -> PathBank:
    """Replace the bank with the logits recorded during the epoch just finished."""
    sizes = {np.asarray(v).size for v in records.values()}
    if len(sizes) > 1:
        raise InvariantError(f"recorded logits have inconsistent lengths {sorted(sizes)}")
    if sizes and bank.logits:
        expected = next(iter(bank.logits.values())).size
        if sizes != {expected}:
            raise InvariantError(f"recorded logits have length {sizes.pop()}, bank holds {expected}")
    return PathBank({q: np.array(v, dtype=np.float64).ravel() for q, v in records.items()}, bank.epoch + 1)


# -------------------------------------------------------------------- metrics


def path_churn(prev: Mapping[str, np.ndarray], curr: Mapping[str, np.ndarray]) -> float:
    """Mean total-variation distance between routing distributions of shared queries."""
    shared = sorted(set(prev) & set(curr))
    if not shared:
        raise ChurnUndefined("no query ids shared between the two routing snapshots")
    a = np.stack([np.asarray(prev[q]) for q in shared])
    b = np.stack([np.asarray(curr[q]) for q in shared])
    return float(np.mean(0.5 * np.abs(a - b).sum(axis=-1)))


def recall_at_k(sims: np.ndarray, targets: Sequence[int], ks: Iterable[int] = RECALL_KS) -> Dict[str, float]:
    """Fraction of queries whose target ranks in the top K; ties go to the lower gallery index."""
    sims = np.atleast_2d(np.asarray(sims, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64)
    if ((targets < 0) | (targets >= sims.shape[1])).any():
        raise EvalError("a query target is absent from the gallery")
    rows = np.arange(len(targets))
    own = sims[rows, targets][:, None]
    cols = np.arange(sims.shape[1])[None, :]
    ahead = (sims > own) | ((sims == own) & (cols < targets[:, None]))
    rank = ahead.sum(axis=1)
    return {f"R{k}": float(np.mean(rank < k)) for k in ks}


def cosine_sims(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    return q @ g.T


def evaluate_recall(params, cfg: TrainConfig, queries: EncodedBatch, gallery_images: np.ndarray,
                    targets: Sequence[int], ks: Iterable[int] = RECALL_KS) -> Dict[str, float]:
    f_q, _ = query_features(params, queries, cfg)
    f_g = gallery_features(params, gallery_images)
    return recall_at_k(cosine_sims(f_q, f_g), targets, ks)


# -------------------------------------------------------------------- trainer


class Trainer:
    """Stateful training loop; one instance per run."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, params: Optional[Dict[str, np.ndarray]] = None):
        self.cfg = cfg
        self.dataset = dataset
        self.params = params if params is not None else init_params(cfg, dataset.universe.vocab_size)
        self.adam = Adam(self.params, weight_decay=cfg.weight_decay)
        self.epoch = 0  # completed epochs
        self.bank = PathBank()
        self.prev_params: Optional[Dict[str, np.ndarray]] = None
        self.prev_probs: Dict[str, np.ndarray] = {}
        self.log: List[dict] = []
        self._epoch_logits: Dict[str, np.ndarray] = {}
        self._epoch_probs: Dict[str, np.ndarray] = {}
        self.site_shape = (n_sites(cfg), 4)

    # batches are a pure function of (seed, epoch) so resuming needs no RNG state
    def batches(self, epoch: int) -> List[np.ndarray]:
        n = len(self.dataset.train)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(n)
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def teacher(self, batch: EncodedBatch):
        cfg = self.cfg
        if not cfg.use_spd or cfg.lam == 0:
            return None, None
        if cfg.teacher == "model_copy":
            if self.prev_params is None:
                return None, None
            from .model import forward_queries

            res = forward_queries({k: T.Tensor(v) for k, v in self.prev_params.items()}, batch, cfg)
            return res.logits.data, np.ones(len(batch), dtype=bool)
        if not self.bank.logits:
            return None, None
        return self.bank.lookup(batch.query_ids, self.site_shape)

    def train_step(self, idx: np.ndarray, epoch: int):
        batch = self.dataset.train_batch.subset(idx)
        teacher, mask = self.teacher(batch)
        leaves = T.leaves(self.params)
        parts, res = compute_loss(leaves, batch, self.cfg, teacher, mask)
        if not np.isfinite(parts.l_total):
            raise NumericsError(f"non-finite loss at epoch {epoch}, step {self.adam.t + 1}")
        grads = T.backward(parts.tensor, wrt=leaves)
        self.adam.step(self.params, grads, self.cfg.lr_at(epoch))
        logits, probs = res.logits.data, res.probs.data
        for i, q in enumerate(batch.query_ids):
            self._epoch_logits[q] = logits[i].ravel().copy()
            self._epoch_probs[q] = probs[i].copy()
        return parts

    def run_epoch(self) -> dict:
        epoch = self.epoch + 1
        if self.cfg.teacher == "model_copy":
            snapshot = {k: v.copy() for k, v in self.params.items()}
        self._epoch_logits, self._epoch_probs = {}, {}
        sums = np.zeros(4)
        batches = self.batches(epoch)
        for idx in batches:
            try:
                parts = self.train_step(idx, epoch)
            except NumericsError as exc:
                raise NumericsError(f"epoch {epoch}, step {self.adam.t + 1}: {exc}") from exc
            sums += [parts.l_bbc, parts.l_cons, parts.l_path, parts.l_total]
        means = sums / len(batches)
        try:
            churn = path_churn(self.prev_probs, self._epoch_probs)
        except ChurnUndefined:
            churn = None
        self.bank = update_teacher_bank(self.bank, self._epoch_logits)
        self.prev_probs = self._epoch_probs
        if self.cfg.teacher == "model_copy":
            self.prev_params = snapshot
        self.epoch = epoch
        recall = self.evaluate()
        record = {
            "epoch": epoch,
            "lr": self.cfg.lr_at(epoch),
            "l_bbc": means[0],
            "l_cons": means[1],
            "l_path": means[2],
            "l_total": means[3],
            **recall,
            "churn": churn,
        }
        record = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in record.items()}
        self.log.append(record)
        logger.info("epoch %d: total %.4f R1 %s churn %s", epoch, record["l_total"], record.get("R1"), churn)
        return record

    def evaluate(self, ks=RECALL_KS) -> Dict[str, float]:
        ds = self.dataset
        if ds.query_batch is None:
            return {}
        return evaluate_recall(self.params, self.cfg, ds.query_batch, ds.gallery_images, ds.query_targets, ks)

    # ----------------------------------------------------------- checkpoints

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for k, v in self.params.items():
            arrays[f"param/{k}"] = v
            arrays[f"adam_m/{k}"] = self.adam.m[k]
            arrays[f"adam_v/{k}"] = self.adam.v[k]
        if self.prev_params is not None:
            for k, v in self.prev_params.items():
                arrays[f"prev_param/{k}"] = v
        bank_ids = sorted(self.bank.logits)
        arrays["bank_ids"] = np.array(bank_ids, dtype=str)
        arrays["bank_logits"] = np.stack([self.bank.logits[q] for q in bank_ids]) if bank_ids else np.zeros((0, 0))
        churn_ids = sorted(self.prev_probs)
        arrays["churn_ids"] = np.array(churn_ids, dtype=str)
        arrays["churn_probs"] = (np.stack([self.prev_probs[q] for q in churn_ids]) if churn_ids
                                 else np.zeros((0,) + self.site_shape))
        meta = {
            "version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "adam_t": self.adam.t,
            "bank_epoch": self.bank.epoch,
            "config": self.cfg.to_dict(),
            "log": self.log,
        }
        arrays["meta"] = np.array(json.dumps(meta))
        with path.open("wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path, dataset: Optional[Dataset] = None) -> "Trainer":
        from .config import parse_config

        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise InvariantError(f"unsupported checkpoint version {meta.get('version')}")
            cfg = parse_config(overrides=meta["config"])
            if dataset is None:
                dataset = build_dataset(cfg)
            params = {k[6:]: z[k].copy() for k in z.files if k.startswith("param/")}
            trainer = cls(cfg, dataset, params)
            trainer.adam.m = {k: z[f"adam_m/{k}"].copy() for k in params}
            trainer.adam.v = {k: z[f"adam_v/{k}"].copy() for k in params}
            trainer.adam.t = int(meta["adam_t"])
            prev = {k[11:]: z[k].copy() for k in z.files if k.startswith("prev_param/")}
            trainer.prev_params = prev or None
            ids = [str(q) for q in z["bank_ids"]]
            trainer.bank = PathBank({q: z["bank_logits"][i].copy() for i, q in enumerate(ids)}, int(meta["bank_epoch"]))
            cids = [str(q) for q in z["churn_ids"]]
            trainer.prev_probs = {q: z["churn_probs"][i].copy() for i, q in enumerate(cids)}
            trainer.epoch = int(meta["epoch"])
            trainer.log = list(meta["log"])
        return trainer


def load_params(path) -> Tuple[TrainConfig, Dict[str, np.ndarray]]:
    from .config import parse_config

    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        cfg = parse_config(overrides=meta["config"])
        return cfg, {k[6:]: z[k].copy() for k in z.files if k.startswith("param/")}


def write_metrics(log: Sequence[dict], path) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    return path


def read_metrics(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def run_training(cfg: TrainConfig, dataset: Optional[Dataset] = None, out_dir=None, callback=None):
    """Train for ``cfg.epochs``; returns ``(params, metrics_log, checkpoint_paths)``.

    With ``out_dir`` set, ``metrics.log`` and ``checkpoints/epoch_N`` are written there.
    """
    dataset = dataset if dataset is not None else build_dataset(cfg)
    trainer = Trainer(cfg, dataset)
    checkpoints = []
    out = Path(out_dir) if out_dir is not None else None
    for _ in range(cfg.epochs):
        record = trainer.run_epoch()
        if out is not None:
            checkpoints.append(trainer.save(out / "checkpoints" / f"epoch_{trainer.epoch}"))
            write_metrics(trainer.log, out / "metrics.log")
        if callback is not None:
            callback(trainer, record)
    return trainer.params, trainer.log, checkpoints


def routing_records(params, cfg: TrainConfig, batch: EncodedBatch) -> List[dict]:
    """One record per (query, routing site) with the site's 4 probabilities."""
    _, probs = query_features(params, batch, cfg)
    sites = site_names(cfg.n_layers, cfg.active_modules)
    out = []
    for i, q in enumerate(batch.query_ids):
        for s, (layer, source) in enumerate(sites):
            out.append({"query_id": q, "layer": layer, "source": source, "probs": probs[i, s].tolist()})
    return out
