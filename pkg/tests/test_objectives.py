import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focalattn import autodiff as ad
from focalattn.autodiff import DimensionError, DomainError, Tape
from focalattn.objectives import (LossWeights, composite_loss, dice_loss, dice_metric, focal_loss,
                                  iou_metric, mse_iou_loss)

# target: 4 positives among 8 pixels; prediction covers exactly 2 of them
TARGET = np.array([[1, 1, 1, 1, 0, 0, 0, 0]], dtype=float)
HALF_HIT = np.array([[1, 1, 0, 0, 0, 0, 0, 0]], dtype=float)


def test_dice_loss_perfect_overlap():
    t = Tape()
    y = np.array([[1, 0, 1, 1, 0.0]])
    eps = 0.5
    loss = dice_loss(t.variable(y), y, eps).value[0]
    assert 0.0 <= loss <= eps / (2 * y.sum() + eps)


def test_dice_loss_disjoint_tends_to_one():
    t = Tape()
    y = np.array([[1, 1, 0, 0.0]])
    assert dice_loss(t.variable(1 - y), y, 1e-9).value[0] == pytest.approx(1.0, abs=1e-8)


def test_dice_loss_hand_count():
    t = Tape()
    assert dice_loss(t.variable(HALF_HIT), TARGET, 0.0).value[0] == pytest.approx(1 - 4 / 6, abs=1e-15)


def test_dice_loss_shape_mismatch():
    t = Tape()
    with pytest.raises(DimensionError):
        dice_loss(t.variable(np.ones((2, 3))), np.ones((3, 2)))


def test_dice_loss_monotone_along_correction_path():
    y = np.array([[1, 1, 0, 0, 1.0]])
    p = np.array([0.9, 0.8, 0.2, 0.1, 0.05])
    losses = []
    for q in np.linspace(0.05, 0.95, 25):   # wrong pixel moves toward its label
        p[4] = q
        losses.append(dice_loss(Tape().variable(p[None]), y, 1.0).value[0])
    assert np.all(np.diff(losses) < 0)


def test_focal_hand_value():
    t = Tape()
    v = focal_loss(t.variable([[0.5]]), [[1.0]], 2.0).value[0]
    assert v == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert v == pytest.approx(0.173287, abs=1e-6)


def test_focal_confident_tends_to_zero():
    t = Tape()
    y = np.array([[1, 0, 1.0]])
    p = np.array([[1 - 1e-6, 1e-6, 1 - 1e-6]])
    assert focal_loss(t.variable(p), y, 2.0).value[0] < 1e-12


def test_focal_gamma_zero_is_bce():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(3, 7))
    y = (rng.uniform(size=(3, 7)) > 0.5).astype(float)
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean(axis=1)
    np.testing.assert_allclose(focal_loss(Tape().variable(p), y, 0.0).value, bce, rtol=1e-14)


def test_focal_rejects_saturated_without_clamp():
    with pytest.raises(DomainError):
        focal_loss(Tape().variable([[1.0, 0.3]]), [[1.0, 0.0]], 2.0, clamp=False)


def test_mse_iou_examples():
    t = Tape()
    true_iou = 0.5
    assert mse_iou_loss(t.variable([true_iou]), HALF_HIT, TARGET).value[0] == pytest.approx(0.0)
    assert mse_iou_loss(t.variable([1.0]), HALF_HIT, TARGET).value[0] == pytest.approx(0.25)
    assert mse_iou_loss(t.variable([0.9]), HALF_HIT, TARGET).value[0] == pytest.approx(0.16)


def test_mse_iou_empty_masks_count_as_perfect():
    t = Tape()
    z = np.zeros((1, 4))
    assert mse_iou_loss(t.variable([1.0]), z, z).value[0] == 0.0


def test_metric_hand_counts():
    np.testing.assert_allclose(dice_metric(HALF_HIT, TARGET), [2 / 3])
    np.testing.assert_allclose(iou_metric(HALF_HIT, TARGET), [0.5])
    np.testing.assert_array_equal(dice_metric(TARGET, TARGET), [1.0])
    np.testing.assert_array_equal(iou_metric(TARGET, TARGET), [1.0])
    np.testing.assert_array_equal(dice_metric(HALF_HIT, 1 - TARGET - 0), [0.0])
    np.testing.assert_array_equal(dice_metric(np.zeros((1, 3)), np.zeros((1, 3))), [1.0])


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64))
def test_dice_iou_identity(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.uniform(size=(3, n)) < rng.uniform()
    y = rng.uniform(size=(3, n)) < rng.uniform()
    d, j = dice_metric(p, y), iou_metric(p, y)
    assert np.max(np.abs(d - 2 * j / (1 + j))) <= 1e-12


def _output(t, probs, iou):
    return SimpleNamespace(mask_probs=t.variable(probs), iou_pred=t.variable(iou))


def test_composite_degenerate_weights_is_dice_sum():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.1, 0.9, size=(3, 10))
    y = (rng.uniform(size=(3, 10)) > 0.5).astype(float)
    t = Tape()
    lb = composite_loss(_output(t, p, [0.5, 0.5, 0.5]), y, LossWeights(alpha=0, mu=0, lam=0))
    assert float(lb.total.value) == pytest.approx(lb.dice_term, abs=1e-12)
    assert lb.dice_term == pytest.approx(float(dice_loss(Tape().variable(p), y, 1.0).value.sum()))


def test_composite_breakdown_identity_and_reg():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.1, 0.9, size=(2, 6))
    y = (rng.uniform(size=(2, 6)) > 0.5).astype(float)
    w = LossWeights(alpha=0.25, mu=0.0625, lam=1e-4)
    t = Tape()
    delta = t.variable([1.0, -1.0])
    lb = composite_loss(_output(t, p, [0.3, 0.8]), y, w, delta)
    assert lb.reg_term == 2.0
    assert w.lam * lb.reg_term == pytest.approx(2e-4)
    recon = (1 - w.alpha) * lb.dice_term + w.alpha * lb.focal_term + w.mu * lb.iou_term + w.lam * lb.reg_term
    assert abs(float(lb.total.value) - recon) <= 1e-10
    assert len(lb.per_class) == 2


def test_composite_no_reg_for_fixed_bias():
    t = Tape()
    y = np.array([[1, 0.0], [0, 1.0]])
    lb = composite_loss(_output(t, np.full((2, 2), 0.4), [0.5, 0.5]), y, LossWeights(), np.array([0.3, -0.3]))
    assert lb.reg_term == 0.0


def test_default_loss_weights():
    w = LossWeights(alpha=0.25, mu=0.0625)
    assert (w.alpha, w.mu, w.lam) == (0.25, 0.0625, 1e-4)


def test_composite_gradient_through_focal_branches():
    rng = np.random.default_rng(3)
    y = (rng.uniform(size=(3, 9)) > 0.4).astype(float)
    params = {"z": rng.normal(size=(3, 9)), "iou": rng.normal(size=3), "delta": rng.normal(size=3)}
    w = LossWeights(alpha=0.4, mu=0.5, lam=0.1)

    def f(t, v):
        out = SimpleNamespace(mask_probs=ad.sigmoid(v["z"]), iou_pred=ad.sigmoid(v["iou"]))
        return composite_loss(out, y, w, v["delta"]).total

    assert ad.finite_diff_check(f, params) <= 1e-4


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=1.5)
    with pytest.raises(ValueError):
        LossWeights(dice_epsilon=0)
