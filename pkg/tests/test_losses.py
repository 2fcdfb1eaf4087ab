import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from brimpr_lab import gradcore as gc
from brimpr_lab.gradcore import Tensor
from brimpr_lab.losses import (DiscReport, adaptive_temperature, calibrated_pseudo_label, cmer_loss,
                               compute_disc_report, iicl_loss, pmgfa_loss, soft_cross_entropy, total_loss)
from brimpr_lab.stats import LayerGaussianStats, SourceStatsBank, batch_stats


def test_ada_tp_midpoint_and_saturation():
    assert adaptive_temperature(5.0, 0.2, 5.0) == pytest.approx(1.1, abs=1e-15)
    hi = adaptive_temperature(50.0, 0.2, 5.0)
    assert 0 <= 1.2 - hi < 1e-15
    assert adaptive_temperature(-1e6) > 1.0 - 1e-15


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 30.0), st.floats(0.01, 1.0), st.floats(0.0, 10.0))
def test_ada_tp_strictly_inside_range(disc_j, tau0, d0):
    t = adaptive_temperature(disc_j, tau0, d0)
    assert 1.0 < t < 1.0 + tau0


def test_lambda_weights():
    r = compute_disc_report(1.0, 3.0, 2.0)
    assert (r.lambda_a, r.lambda_v) == pytest.approx((0.75, 0.25))
    z = compute_disc_report(0.0, 0.0, 0.0)
    assert (z.lambda_a, z.lambda_v) == (0.5, 0.5)
    s = compute_disc_report(1.0, 3.0, 2.0, swap_lambdas=True)
    assert (s.lambda_a, s.lambda_v) == pytest.approx((0.25, 0.75))
    with pytest.raises(ValueError):
        compute_disc_report(-1.0, 1.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 100))
def test_lambdas_sum_to_one(a, v, j):
    r = compute_disc_report(a, v, j)
    assert r.lambda_a + r.lambda_v == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= r.lambda_a <= 1.0


def test_pseudo_label_oracle():
    p = calibrated_pseudo_label(np.array([2.0, 0.0]), 2.0)
    e = math.e
    np.testing.assert_allclose(p, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    np.testing.assert_allclose(p, [0.7311, 0.2689], atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-20, 20)), st.floats(1.0, 5.0))
def test_pseudo_label_properties(logits, t):
    vanilla = calibrated_pseudo_label(logits, 1.0)
    ref = np.exp(logits - logits.max())
    np.testing.assert_allclose(vanilla, ref / ref.sum(), atol=1e-12)
    p = calibrated_pseudo_label(logits, t)
    assert np.argmax(p) == np.argmax(vanilla) or np.isclose(p.max(), p[np.argmax(vanilla)])
    ent = lambda q: -np.sum(q * np.log(q + 1e-300))
    assert ent(p) >= ent(vanilla) - 1e-12


def test_pseudo_label_is_detached():
    logits = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    assert isinstance(calibrated_pseudo_label(logits, 1.5), np.ndarray)


def bank_of(stats):
    return SourceStatsBank({"a": [stats["a"]], "v": [stats["v"]]})


def test_pmgfa_zero_when_aligned_and_additive():
    rng = np.random.default_rng(0)
    fa, fv = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    bank = bank_of({"a": batch_stats(fa), "v": batch_stats(fv)})
    assert pmgfa_loss(bank, {"a": [batch_stats(fa)], "v": [batch_stats(fv)]}).item() == 0.0
    shifted = batch_stats(fa + 1.0)
    only_a = pmgfa_loss(bank, {"a": [shifted], "v": [batch_stats(fv)]}).item()
    assert only_a == pytest.approx(np.sqrt(3.0))


def test_cmer_perfect_match_and_zero_weight():
    onehot = np.array([[1.0, 0.0, 0.0]])
    report = DiscReport(1, 1, 1, 1.0, 0.0, 1.1)
    loss = cmer_loss(Tensor(onehot), Tensor(onehot), onehot, report)
    assert loss.item() == pytest.approx(0.0, abs=1e-11)
    y_amv = Tensor(np.array([[0.2, 0.5, 0.3]]), requires_grad=True)
    y_avm = Tensor(np.array([[0.6, 0.1, 0.3]]), requires_grad=True)
    g = gc.backprop(cmer_loss(y_amv, y_avm, np.array([[0.1, 0.8, 0.1]]), report), [y_amv, y_avm])
    assert np.all(g[y_avm] == 0)
    with pytest.raises(ValueError):
        cmer_loss(y_amv, y_avm, np.array([[0.5, 0.6, 0.1]]), report)


def test_cmer_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    la, lv = Tensor(rng.standard_normal((2, 4)), requires_grad=True), Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    pseudo = calibrated_pseudo_label(rng.standard_normal((2, 4)), 1.1)
    report = compute_disc_report(0.4, 1.3, 5.0)
    fn = lambda: cmer_loss(gc.softmax(la), gc.softmax(lv), pseudo, report)
    assert gc.finite_difference_check(fn, [la, lv]) < 1e-4


def test_soft_cross_entropy_is_batch_mean():
    p = Tensor(np.array([[0.5, 0.5], [0.25, 0.75]]))
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert soft_cross_entropy(p, t).item() == pytest.approx(-(math.log(0.5) + math.log(0.75)) / 2, abs=1e-10)


def test_iicl_single_sample_is_zero():
    z = np.array([[0.3, -1.2, 2.0]])
    assert iicl_loss(z, z * -1.0, 0.07).item() == 0.0


def test_iicl_two_by_two_oracle():
    za = np.array([[1.0, 0.0], [0.0, 1.0]])
    # similarity matrix is the identity; each row's softmax picks e^1 out of e^1 + e^0
    rows = [-math.log(math.exp(1) / (math.exp(1) + math.exp(0))) for _ in range(2)]
    expected = (sum(rows) + sum(rows)) / 4
    assert iicl_loss(za, za.copy(), 1.0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(math.log(1 + math.exp(-1)))


def test_iicl_gradient_and_errors():
    rng = np.random.default_rng(2)
    za, zv = Tensor(rng.standard_normal((4, 5)), requires_grad=True), Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    assert gc.finite_difference_check(lambda: iicl_loss(za, zv, 0.25), [za, zv]) < 1e-4
    with pytest.raises(ValueError):
        iicl_loss(za, zv, 0.0)
    with pytest.raises(gc.ShapeError):
        iicl_loss(za, Tensor(np.ones((3, 5))), 0.1)
    zero = iicl_loss(np.zeros((2, 3)), np.ones((2, 3)), 0.1)
    assert np.isfinite(zero.item())


def test_total_loss_sums():
    assert total_loss(1.0, 2.0, 3.0).total == 6.0
    assert total_loss(0.0, 0.0, 0.0).total == 0.0
    b = total_loss(1.0, 2.0, 3.0, weights=(1, 0, 1))
    assert (b.pmgfa, b.cmer, b.iicl, b.total) == (1.0, 2.0, 3.0, 4.0)
