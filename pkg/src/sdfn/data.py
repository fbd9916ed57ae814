"""Synthetic compositional retrieval world.

Items are attribute vectors.  Images render each attribute as a one-hot of
its value in a fixed grid cell, plus Gaussian noise.  Modification texts are
``set <attr> to <value>`` edit phrases.  The target is the reference with the
edits applied.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import TrainConfig
from .exceptions import ConfigError, EvalError, ParseError, ShapeError

FUNCTION_TOKENS = ("set", "to")
PAD_TOKEN = 0


@dataclass(frozen=True)
class ItemUniverse:
    n_attrs: int
    n_values: int
    seed: int
    grid: int = 4
    c_in: int = 8
    cells: Tuple[int, ...] = ()
    vocabulary: Tuple[str, ...] = ()

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    @property
    def n_positions(self) -> int:
        return self.grid * self.grid

    def attr_token(self, a: int) -> int:
        return 2 + a

    def value_token(self, a: int, v: int) -> int:
        return 2 + self.n_attrs + a * self.n_values + v

    def token_id(self, word: str) -> int:
        return self.vocabulary.index(word)

    def words(self, tokens: Iterable[int]) -> List[str]:
        return [self.vocabulary[t] for t in tokens]


@dataclass(frozen=True)
class TripletRecord:
    query_id: str
    reference: Tuple[int, ...]
    edits: Tuple[Tuple[int, int], ...]
    target: Tuple[int, ...]
    tokens: Tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "reference": list(self.reference),
            "edits": [list(e) for e in self.edits],
            "target": list(self.target),
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TripletRecord":
        return cls(
            query_id=str(obj["query_id"]),
            reference=tuple(int(x) for x in obj["reference"]),
            edits=tuple((int(a), int(v)) for a, v in obj["edits"]),
            target=tuple(int(x) for x in obj["target"]),
            tokens=tuple(int(x) for x in obj["tokens"]),
        )


def generate_world(seed: int, n_attrs: int, n_values: int, grid: int = 4, c_in: int = 8) -> ItemUniverse:
    """Vocabulary is ``set, to``, then attribute names, then per-attribute value names."""
    if n_attrs < 2 or n_values < 2:
        raise ConfigError(f"need at least 2 attributes and 2 values, got A={n_attrs}, V={n_values}")
    if n_attrs > grid * grid:
        raise ConfigError(f"{n_attrs} attributes do not fit a {grid}x{grid} grid")
    if n_values > c_in:
        raise ConfigError(f"{n_values} values do not fit {c_in} channels")
    rng = np.random.default_rng(seed)
    cells = tuple(int(c) for c in rng.choice(grid * grid, size=n_attrs, replace=False))
    vocab = list(FUNCTION_TOKENS)
    vocab += [f"a{a}" for a in range(n_attrs)]
    vocab += [f"a{a}.v{v}" for a in range(n_attrs) for v in range(n_values)]
    return ItemUniverse(n_attrs, n_values, seed, grid, c_in, cells, tuple(vocab))


def render_image(item: Sequence[int], universe: ItemUniverse, noise: float, seed) -> np.ndarray:
    if len(item) != universe.n_attrs:
        raise ShapeError(f"item has {len(item)} attributes, universe has {universe.n_attrs}")
    g = universe.grid
    img = np.zeros((g * g, universe.c_in))
    for a, v in enumerate(item):
        img[universe.cells[a], v] = 1.0
    if noise > 0:
        img += np.random.default_rng(seed).normal(0.0, noise, size=img.shape)
    return img.reshape(g, g, universe.c_in)


def edit_tokens(universe: ItemUniverse, edits: Sequence[Tuple[int, int]]) -> Tuple[int, ...]:
    out: List[int] = []
    for a, v in edits:
        out += [0, universe.attr_token(a), 1, universe.value_token(a, v)]
    return tuple(out)


def decode_tokens(tokens: Sequence[int], universe: ItemUniverse) -> List[Tuple[int, int]]:
    """Parse a token sequence back into ``(attribute, value)`` edits."""
    if len(tokens) == 0 or len(tokens) % 4:
        raise ParseError(f"token sequence of length {len(tokens)} is not a list of 4-token edits")
    edits = []
    n_a = universe.n_attrs
    for i in range(0, len(tokens), 4):
        s, a_tok, t, v_tok = tokens[i:i + 4]
        a = a_tok - 2
        if s != 0 or t != 1 or not 0 <= a < n_a:
            raise ParseError(f"malformed edit at token {i}: {universe.words(tokens[i:i + 4])}")
        off = v_tok - 2 - n_a
        if not 0 <= off < n_a * universe.n_values or off // universe.n_values != a:
            raise ParseError(f"value token {v_tok} does not belong to attribute a{a}")
        edits.append((a, off % universe.n_values))
    return edits


def apply_edits(item: Sequence[int], edits: Iterable[Tuple[int, int]]) -> Tuple[int, ...]:
    out = list(item)
    for a, v in edits:
        out[a] = v
    return tuple(out)


def _sample_edits(rng, item, universe, max_edits):
    k = int(rng.integers(1, max_edits + 1))
    attrs = rng.choice(universe.n_attrs, size=k, replace=False)
    return tuple((int(a), int((item[a] + rng.integers(1, universe.n_values)) % universe.n_values)) for a in attrs)


def generate_triplets(
    universe: ItemUniverse,
    n: int,
    max_edits: int,
    seed: int,
    prefix: str = "q",
    exclude: Optional[set] = None,
) -> List[TripletRecord]:
    """Random references with 1..max_edits value-changing edits each.

    ``exclude`` holds ``(reference, target)`` pairs that must not be produced.
    """
    if n <= 0:
        raise ConfigError(f"n must be positive, got {n}")
    if not 1 <= max_edits <= universe.n_attrs:
        raise ConfigError(f"max_edits must be in [1, {universe.n_attrs}], got {max_edits}")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        ref = tuple(int(v) for v in rng.integers(0, universe.n_values, size=universe.n_attrs))
        edits = _sample_edits(rng, ref, universe, max_edits)
        target = apply_edits(ref, edits)
        if exclude and (ref, target) in exclude:
            continue
        out.append(TripletRecord(f"{prefix}{len(out):06d}", ref, edits, target, edit_tokens(universe, edits)))
    return out


def item_index(item: Sequence[int], n_values: int) -> int:
    idx = 0
    for v in item:
        idx = idx * n_values + v
    return idx


def item_from_index(idx: int, n_attrs: int, n_values: int) -> Tuple[int, ...]:
    out = []
    for _ in range(n_attrs):
        idx, v = divmod(idx, n_values)
        out.append(v)
    return tuple(reversed(out))


def generate_eval_split(
    universe: ItemUniverse, n_queries: int, gallery_size: int, max_edits: int, seed: int, prefix: str = "e"
) -> Tuple[List[TripletRecord], List[Tuple[int, ...]]]:
    """Queries whose reference and target both live in a ``gallery_size`` item gallery."""
    rng = np.random.default_rng(seed)
    total = universe.n_values ** universe.n_attrs
    picks = np.sort(rng.choice(total, size=gallery_size, replace=False))
    gallery = [item_from_index(int(i), universe.n_attrs, universe.n_values) for i in picks]
    arr = np.array(gallery)
    dist = (arr[:, None, :] != arr[None, :, :]).sum(-1)
    ri, ti = np.nonzero((dist >= 1) & (dist <= max_edits))
    if len(ri) == 0:
        raise ConfigError("gallery has no item pairs within max_edits of each other")
    chosen = rng.choice(len(ri), size=n_queries, replace=len(ri) < n_queries)
    queries = []
    for q, c in enumerate(chosen):
        ref, tgt = gallery[ri[c]], gallery[ti[c]]
        attrs = [a for a in range(universe.n_attrs) if ref[a] != tgt[a]]
        attrs = [attrs[i] for i in rng.permutation(len(attrs))]
        edits = tuple((a, tgt[a]) for a in attrs)
        queries.append(TripletRecord(f"{prefix}{q:06d}", ref, edits, tgt, edit_tokens(universe, edits)))
    return queries, gallery


def symbolic_solve(record: TripletRecord, gallery: Sequence[Sequence[int]], universe: ItemUniverse) -> int:
    """Index of the gallery item obtained by applying the decoded edits to the reference."""
    want = apply_edits(record.reference, decode_tokens(record.tokens, universe))
    hits = [i for i, item in enumerate(gallery) if tuple(item) == want]
    if not hits:
        raise EvalError(f"target of {record.query_id} is not in the gallery")
    return hits[0]


# ---------------------------------------------------------------------- io


def write_triplets(records: Iterable[TripletRecord], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
    return path


def read_triplets(path) -> List[TripletRecord]:
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(TripletRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{exc.__class__.__name__}: {exc}", line=lineno) from None
    return out


# ------------------------------------------------------------ arrays for models


@dataclass
class EncodedBatch:
    """Model-ready arrays for a batch of triplets."""

    query_ids: List[str]
    ref_images: np.ndarray  # (B, H, W, C)
    tokens: np.ndarray  # (B, L) int, padded with PAD_TOKEN
    mask: np.ndarray  # (B, L) bool
    tgt_images: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.query_ids)

    def subset(self, idx) -> "EncodedBatch":
        idx = np.asarray(idx)
        return EncodedBatch(
            [self.query_ids[i] for i in idx],
            self.ref_images[idx],
            self.tokens[idx],
            self.mask[idx],
            None if self.tgt_images is None else self.tgt_images[idx],
        )


def pad_tokens(seqs: Sequence[Sequence[int]], vocab_size: Optional[int] = None):
    length = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), length), PAD_TOKEN, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return tokens, mask


def _render_seed(seed: int, split: int, index: int, role: int):
    return [seed, split, index, role]


def encode_records(
    records: Sequence[TripletRecord], universe: ItemUniverse, noise: float, seed: int, split: int,
    with_targets: bool = True,
) -> EncodedBatch:
    refs = np.stack([render_image(r.reference, universe, noise, _render_seed(seed, split, i, 0))
                     for i, r in enumerate(records)])
    tgts = None
    if with_targets:
        tgts = np.stack([render_image(r.target, universe, noise, _render_seed(seed, split, i, 1))
                         for i, r in enumerate(records)])
    tokens, mask = pad_tokens([r.tokens for r in records])
    return EncodedBatch([r.query_id for r in records], refs, tokens, mask, tgts)


@dataclass
class Dataset:
    universe: ItemUniverse
    train: List[TripletRecord]
    queries: List[TripletRecord]
    gallery: List[Tuple[int, ...]]
    train_batch: EncodedBatch = field(repr=False)
    query_batch: Optional[EncodedBatch] = field(repr=False)
    gallery_images: np.ndarray = field(repr=False)
    query_targets: np.ndarray = field(repr=False)


def build_dataset(cfg: TrainConfig) -> Dataset:
    """Universe, training triplets, held-out queries and gallery for a config."""
    universe = generate_world(cfg.seed, cfg.n_attrs, cfg.n_values, cfg.grid, cfg.c_in)
    queries, gallery = generate_eval_split(universe, cfg.n_eval, cfg.gallery_size, cfg.max_edits, cfg.seed + 1)
    held_out = {(q.reference, q.target) for q in queries}
    train = generate_triplets(universe, cfg.n_train, cfg.max_edits, cfg.seed + 2, prefix="t", exclude=held_out)
    return dataset_from_records(cfg, universe, train, queries, gallery)


def render_gallery(items, universe: ItemUniverse, noise: float, seed: int) -> np.ndarray:
    if not items:
        return np.zeros((0, universe.grid, universe.grid, universe.c_in))
    return np.stack([render_image(item, universe, noise, _render_seed(seed, 2, i, 1)) for i, item in enumerate(items)])


def dataset_from_records(cfg, universe, train, queries, gallery) -> Dataset:
    lookup = {tuple(item): i for i, item in enumerate(gallery)}
    targets = []
    for q in queries:
        if q.target not in lookup:
            raise EvalError(f"target of {q.query_id} is not in the gallery")
        targets.append(lookup[q.target])
    gallery_images = render_gallery(gallery, universe, cfg.noise, cfg.seed)
    return Dataset(
        universe=universe,
        train=list(train),
        queries=list(queries),
        gallery=[tuple(g) for g in gallery],
        train_batch=encode_records(train, universe, cfg.noise, cfg.seed, 0) if train else None,
        query_batch=(encode_records(queries, universe, cfg.noise, cfg.seed, 1, with_targets=False)
                     if queries else None),
        gallery_images=gallery_images,
        query_targets=np.array(targets, dtype=np.int64),
    )
