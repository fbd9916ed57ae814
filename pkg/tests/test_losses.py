import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles as O
from sdfn import tensor as T
from sdfn.exceptions import NumericsError, ShapeError
from sdfn.gradcheck import finite_diff_check
from sdfn.losses import bbc_loss, consistency_loss, spd_loss, total_loss

finite = st.floats(-5, 5, allow_nan=False)


# ------------------------------------------------------------------------- bbc


def test_bbc_single_item_is_zero():
    assert bbc_loss(np.array([[0.3, -1.0, 2.0]]), np.array([[1.0, 1.0, 0.5]])).data == 0.0


def test_bbc_two_point_closed_form():
    eye = np.eye(2)
    got = float(bbc_loss(eye, eye, scale=1.0).data)
    assert got == pytest.approx(0.31326, abs=1e-5)
    assert got == pytest.approx(math.log1p(math.exp(-1.0)), rel=1e-14)


def test_bbc_large_scale_goes_to_zero():
    eye = np.eye(3)
    assert float(bbc_loss(eye, eye, scale=1e3).data) < 1e-12


def test_bbc_zero_row():
    with pytest.raises(NumericsError):
        bbc_loss(np.array([[0.0, 0.0], [1.0, 0.0]]), np.eye(2))


def test_bbc_shape_mismatch():
    with pytest.raises(ShapeError):
        bbc_loss(np.ones((2, 3)), np.ones((3, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_bbc_row_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    fq, ft = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    scaled = fq.copy()
    scaled[rng.integers(4)] *= c
    assert abs(float(bbc_loss(fq, ft).data) - float(bbc_loss(scaled, ft).data)) <= 1e-9


# ----------------------------------------------------------------- consistency


def test_cons_identical_is_zero():
    f = np.random.default_rng(0).normal(size=(4, 6))
    assert consistency_loss(f, f, f).data == 0.0


def test_cons_scalar_grams():
    assert float(consistency_loss([[1.0]], [[2.0]], [[1.0]]).data) == 6.0


def test_cons_batch_mismatch():
    with pytest.raises(ShapeError):
        consistency_loss(np.ones((2, 3)), np.ones((3, 3)), np.ones((2, 3)))


def test_cons_sign_invariant():
    rng = np.random.default_rng(1)
    fq, ft, fin = (rng.normal(size=(3, 4)) for _ in range(3))
    assert float(consistency_loss(fq, ft, fin).data) == pytest.approx(float(consistency_loss(-fq, ft, fin).data),
                                                                        rel=1e-14)


def test_cons_matches_direct_formula():
    rng = np.random.default_rng(2)
    fq, ft, fin = (rng.normal(size=(3, 4)) for _ in range(3))
    gt = ft @ ft.T
    expected = np.linalg.norm(fq @ fq.T - gt) + np.linalg.norm(fin @ fin.T - gt)
    assert float(consistency_loss(fq, ft, fin).data) == pytest.approx(expected, rel=1e-13)


# ------------------------------------------------------------------------- spd


def test_spd_identical_is_zero():
    x = np.random.default_rng(3).normal(size=(4, 9, 4))
    assert spd_loss(x, x, 2.0).data == 0.0
    assert spd_loss(x, x, 0.3).data == 0.0


def test_spd_two_point_golden():
    got = float(spd_loss(np.array([[[2.0, 0.0]]]), np.array([[[0.0, 2.0]]]), tau=2.0).data)
    assert got == pytest.approx(1.84847, abs=1e-4)
    p = O.softmax_ref([1.0, 0.0])
    assert got == pytest.approx(4 * O.kl_ref(p, p[::-1]), rel=1e-13)


def test_spd_uniform_teacher():
    got = float(spd_loss(np.array([[[10.0, 0, 0, 0]]]), np.zeros((1, 1, 4)), tau=1.0).data)
    p = O.softmax_ref([10.0, 0, 0, 0])
    entropy = -sum(a * math.log(a) for a in p)
    assert got == pytest.approx(math.log(4) - entropy, rel=1e-12)
    assert got == pytest.approx(O.kl_ref(p, [0.25] * 4), rel=1e-12)


def test_spd_kl_direction_is_student_first():
    s, t = np.array([[[3.0, 0.0, -1.0]]]), np.array([[[0.0, 1.0, 0.0]]])
    ps, pt = O.softmax_ref(s[0, 0]), O.softmax_ref(t[0, 0])
    assert float(spd_loss(s, t, tau=1.0).data) == pytest.approx(O.kl_ref(ps, pt), rel=1e-12)
    assert O.kl_ref(ps, pt) != pytest.approx(O.kl_ref(pt, ps), rel=1e-3)


def test_spd_site_mean_and_batch_divisor():
    rng = np.random.default_rng(4)
    s, t = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
    mask = np.array([True, False, True])
    per = np.array([[O.kl_ref(O.softmax_ref(s[b, k] / 2), O.softmax_ref(t[b, k] / 2)) for k in range(5)]
                    for b in range(3)]).mean(1)
    expected = 4.0 * (per[0] + per[2]) / 3
    assert float(spd_loss(s, t, 2.0, mask=mask).data) == pytest.approx(expected, rel=1e-12)


def test_spd_shape_mismatch():
    with pytest.raises(ShapeError):
        spd_loss(np.zeros((2, 3, 4)), np.zeros((2, 2, 4)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=finite), arrays(np.float64, (2, 3, 4), elements=finite),
       st.floats(0.1, 10))
def test_spd_non_negative(s, t, tau):
    assert float(spd_loss(s, t, tau).data) >= -1e-15


def test_spd_no_gradient_to_teacher():
    rng = np.random.default_rng(5)
    s = T.parameter(rng.normal(size=(2, 3, 4)), "s")
    t = T.parameter(rng.normal(size=(2, 3, 4)), "t")
    grads = T.backward(spd_loss(s, t, 2.0), wrt={"s": s, "t": t})
    np.testing.assert_array_equal(grads["t"], 0.0)
    assert np.abs(grads["s"]).max() > 0


# ----------------------------------------------------------------------- total


def test_total_arithmetic():
    assert total_loss(1.0, 2.0, 3.0, 0.6).l_total == pytest.approx(4.8, abs=1e-12)
    assert total_loss(1.0, 2.0, 3.0, 0.0).l_total == 3.0
    assert total_loss(0.5, 0.25, 0.25, 1.0).l_total == 1.0


def test_total_rejects_negative_lambda():
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.0, -0.1)


def test_total_breakdown_invariant():
    rng = np.random.default_rng(6)
    parts = [T.Tensor(v) for v in rng.random(3)]
    br = total_loss(*parts, lam=0.6)
    assert abs(br.l_total - (br.l_bbc + br.l_cons + 0.6 * br.l_path)) <= 1e-12
    assert float(br.tensor.data) == br.l_total


# ------------------------------------------------------------------- gradients


@pytest.mark.parametrize("seed", range(5))
def test_bbc_gradients(seed):
    rng = np.random.default_rng(seed)
    params = {"fq": rng.normal(size=(2, 8)), "ft": rng.normal(size=(2, 8))}
    assert finite_diff_check(lambda t: bbc_loss(t["fq"], t["ft"]), params).passed


@pytest.mark.parametrize("seed", range(5))
def test_cons_gradients(seed):
    rng = np.random.default_rng(seed)
    params = {k: rng.normal(size=(2, 8)) for k in ("fq", "ft", "fin")}
    rep = finite_diff_check(lambda t: consistency_loss(t["fq"], t["ft"], t["fin"]), params)
    assert rep.passed, str(rep)


@pytest.mark.parametrize("seed", range(5))
def test_spd_gradients(seed):
    rng = np.random.default_rng(seed)
    teacher = rng.normal(size=(2, 9, 4))
    mask = np.array([True, seed % 2 == 0])
    rep = finite_diff_check(lambda t: spd_loss(t["s"], teacher, 2.0, mask), {"s": rng.normal(size=(2, 9, 4))})
    assert rep.passed, str(rep)
