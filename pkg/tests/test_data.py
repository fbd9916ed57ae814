import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfn.config import TrainConfig
from sdfn.data import (
    TripletRecord,
    apply_edits,
    build_dataset,
    decode_tokens,
    edit_tokens,
    generate_eval_split,
    generate_triplets,
    generate_world,
    item_from_index,
    item_index,
    pad_tokens,
    read_triplets,
    render_image,
    symbolic_solve,
    write_triplets,
)
from sdfn.exceptions import ConfigError, EvalError, ParseError, ShapeError


@pytest.fixture(scope="module")
def world():
    return generate_world(1, 4, 6)


def test_vocab_size():
    assert generate_world(0, 4, 4).vocab_size == 22
    assert generate_world(0, 4, 6).vocab_size == 4 + 24 + 2


def test_world_deterministic():
    assert generate_world(9, 4, 5) == generate_world(9, 4, 5)


def test_world_vocabulary_dense_and_named(world):
    assert world.vocabulary[:2] == ("set", "to")
    assert world.words([world.attr_token(1), world.value_token(1, 3)]) == ["a1", "a1.v3"]
    assert len(set(world.vocabulary)) == world.vocab_size


@pytest.mark.parametrize("a, v", [(1, 4), (4, 1), (17, 2), (2, 9)])
def test_world_rejects(a, v):
    with pytest.raises(ConfigError):
        generate_world(0, a, v)


def test_render_noiseless_argmax():
    u = generate_world(0, 4, 4, grid=2, c_in=4)
    item = [2, 0, 1, 3]
    img = render_image(item, u, 0.0, seed=0).reshape(4, 4)
    for a, v in enumerate(item):
        assert img[u.cells[a]].argmax() == v
        assert img[u.cells[a]].sum() == 1.0


def test_render_locality():
    u = generate_world(0, 4, 6)
    a = render_image([1, 2, 3, 4], u, 0.0, 0)
    b = render_image([1, 2, 5, 4], u, 0.0, 0)
    diff = np.argwhere((a != b).any(-1))
    assert len(diff) == 1
    assert tuple(diff[0]) == divmod(u.cells[2], u.grid)


def test_render_seeded_noise():
    u = generate_world(0, 4, 4, grid=2, c_in=4)
    img = render_image([2, 0, 1, 3], u, 0.1, seed=3)
    expected = np.random.default_rng(3).normal(0.0, 0.1, size=(4, 4))
    for a, v in enumerate([2, 0, 1, 3]):
        expected[u.cells[a], v] += 1.0
    np.testing.assert_array_equal(img, expected.reshape(2, 2, 4))
    assert img.sum() == pytest.approx(3.635107533523339, rel=1e-12)


def test_render_wrong_length(world):
    with pytest.raises(ShapeError):
        render_image([1, 2], world, 0.0, 0)


def test_distinct_items_render_distinct(world):
    items = [item_from_index(i, 4, 6) for i in range(0, 6 ** 4, 37)]
    grids = {render_image(it, world, 0.0, 0).tobytes() for it in items}
    assert len(grids) == len(items)


def test_single_edit_tokens(world):
    toks = edit_tokens(world, [(1, 3)])
    assert world.words(toks) == ["set", "a1", "to", "a1.v3"]


def test_triplets_golden_seed5(world):
    recs = generate_triplets(world, 3, 2, seed=5)
    assert [r.query_id for r in recs] == ["q000000", "q000001", "q000002"]
    assert recs[0].reference == (4, 4, 0, 4) and recs[0].edits == ((2, 4),) and recs[0].target == (4, 4, 4, 4)
    assert recs[1].tokens == (0, 4, 1, 21)
    assert recs[2].target == (0, 0, 0, 1)


def test_triplet_invariants(world):
    for r in generate_triplets(world, 300, 3, seed=8):
        assert 1 <= len(r.edits) <= 3
        assert apply_edits(r.reference, r.edits) == r.target
        for a, v in r.edits:
            assert r.reference[a] != v
        assert decode_tokens(r.tokens, world) == list(r.edits)


def test_triplets_deterministic(world):
    assert generate_triplets(world, 20, 2, 4) == generate_triplets(world, 20, 2, 4)


def test_triplets_reject_bad_n(world):
    with pytest.raises(ConfigError):
        generate_triplets(world, 0, 2, 0)


def test_exclusion(world):
    first = generate_triplets(world, 50, 2, 1)
    banned = {(r.reference, r.target) for r in first}
    again = generate_triplets(world, 50, 2, 1, exclude=banned)
    assert not banned & {(r.reference, r.target) for r in again}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 5)), min_size=1, max_size=6))
def test_grammar_prefix_decodable(edits):
    u = generate_world(1, 4, 6)
    assert decode_tokens(edit_tokens(u, edits), u) == edits


@pytest.mark.parametrize("tokens", [[], [0, 2, 1], [1, 2, 0, 6], [0, 2, 1, 12], [0, 9, 1, 6]])
def test_decode_rejects(world, tokens):
    with pytest.raises(ParseError):
        decode_tokens(tokens, world)


def test_item_index_roundtrip():
    for idx in (0, 1, 215, 1295):
        assert item_index(item_from_index(idx, 4, 6), 6) == idx


def test_eval_split_symbolically_solvable(world):
    queries, gallery = generate_eval_split(world, 200, 64, 2, seed=3)
    assert len(set(gallery)) == 64
    for q in queries:
        assert gallery[symbolic_solve(q, gallery, world)] == q.target
        assert 1 <= sum(a != b for a, b in zip(q.reference, q.target)) <= 2
        assert q.reference in gallery


def test_symbolic_solver_reports_missing(world):
    rec = TripletRecord("x", (0, 0, 0, 0), ((0, 1),), (1, 0, 0, 0), edit_tokens(world, [(0, 1)]))
    with pytest.raises(EvalError):
        symbolic_solve(rec, [(0, 0, 0, 0)], world)


def test_io_roundtrip(world, tmp_path):
    recs = generate_triplets(world, 100, 2, 0)
    assert read_triplets(write_triplets(recs, tmp_path / "d.jsonl")) == recs


def test_io_fields(world, tmp_path):
    write_triplets(generate_triplets(world, 1, 2, 0), tmp_path / "d.jsonl")
    import json
    row = json.loads((tmp_path / "d.jsonl").read_text())
    assert set(row) == {"query_id", "reference", "edits", "target", "tokens"}


def test_io_empty(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_triplets(tmp_path / "e.jsonl") == []


def test_io_truncated_line(world, tmp_path):
    path = write_triplets(generate_triplets(world, 3, 2, 0), tmp_path / "d.jsonl")
    text = path.read_text()
    path.write_text(text[:-15])
    with pytest.raises(ParseError) as err:
        read_triplets(path)
    assert err.value.line == 3
    assert "line 3" in str(err.value)


def test_pad_tokens():
    tokens, mask = pad_tokens([[3, 4, 5, 6], [7, 8]])
    np.testing.assert_array_equal(tokens, [[3, 4, 5, 6], [7, 8, 0, 0]])
    np.testing.assert_array_equal(mask, [[1, 1, 1, 1], [1, 1, 0, 0]])


def test_build_dataset_small():
    cfg = TrainConfig(n_train=40, n_eval=30, gallery_size=32)
    ds = build_dataset(cfg)
    assert ds.train_batch.ref_images.shape == (40, 4, 4, 8)
    assert ds.gallery_images.shape == (32, 4, 4, 8)
    held = {(q.reference, q.target) for q in ds.queries}
    assert not held & {(r.reference, r.target) for r in ds.train}
    for q, t in zip(ds.queries, ds.query_targets):
        assert ds.gallery[t] == q.target
