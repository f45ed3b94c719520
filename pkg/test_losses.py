#!/usr/bin/env python3
"""
Tests for Dice losses and evaluation metrics.
"""

import numpy as np
import pytest

from errors import ConfigInvalid, EmptyDataset, ShapeMismatch
from losses import (
    LossWeights,
    confusion_counts,
    dice_loss,
    dice_score,
    macro_dice,
    per_region_dice,
    stage_loss,
    threshold,
    total_loss,
)
from nncore import CHECK_DTYPE, Tape, Tensor, backward, max_relative_error, numerical_gradient


def probs(values):
    return Tensor(np.asarray(values, dtype=CHECK_DTYPE), requires_grad=True, dtype=CHECK_DTYPE)


def test_dice_loss_examples():
    y = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(np.uint8)
    assert dice_loss(probs(y), y).item() <= 1e-6

    a = np.zeros((4, 4))
    a[:2] = 1
    b = np.zeros((4, 4))
    b[2:] = 1
    assert dice_loss(probs(a), b).item() == pytest.approx(1.0, abs=1e-6)

    assert dice_loss(probs(np.full((5, 5), 0.5)), np.ones((5, 5))).item() == pytest.approx(1 / 3, abs=1e-6)


def test_dice_loss_empty_pair_is_zero():
    assert dice_loss(probs(np.zeros((4, 4))), np.zeros((4, 4))).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_loss_batch_is_mean_over_images():
    rng = np.random.default_rng(1)
    pred = rng.random((3, 6, 6))
    target = (rng.random((3, 6, 6)) > 0.5).astype(np.uint8)
    batch = dice_loss(probs(pred), target).item()
    single = np.mean([dice_loss(probs(p), t).item() for p, t in zip(pred, target)])
    assert batch == pytest.approx(single, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_dice_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    pred = probs(rng.uniform(0.05, 0.95, (6, 6)))
    target = (rng.random((6, 6)) > 0.5).astype(np.uint8)
    with Tape() as tape:
        backward(dice_loss(pred, target), tape)
    numeric = numerical_gradient(lambda: dice_loss(Tensor(pred.values, dtype=CHECK_DTYPE), target).item(),
                                 pred.values)
    assert max_relative_error(pred.grad, numeric, floor=1e-3) <= 1e-4


def test_stage_loss_weighted_sum():
    pred = np.zeros((6, 3, 7))
    target = np.zeros((6, 3, 7), dtype=np.uint8)
    # channel 0: 3 true pixels, 2 of them predicted -> Dice 0.8, loss 0.2
    target[0, 0, :3] = 1
    pred[0, 0, :2] = 1
    # channel 1: 7 true pixels, 3 of them predicted -> Dice 0.6, loss 0.4
    target[1, 1, :] = 1
    pred[1, 1, :3] = 1
    weights = [2.5, 0.7, 0.0, 0.0, 0.0, 0.0]
    assert stage_loss(probs(pred), target, weights).item() == pytest.approx(0.78, abs=1e-5)
    assert stage_loss(probs(pred), target, [0.0] * 6).item() == 0.0


def test_stage_loss_perfect_prediction():
    target = (np.random.default_rng(2).random((2, 6, 5, 5)) > 0.5).astype(np.uint8)
    assert stage_loss(probs(target), target, [1.0] * 6).item() <= 1e-5


def test_stage_loss_shape_checks():
    with pytest.raises(ShapeMismatch):
        stage_loss(probs(np.zeros((6, 4, 4))), np.zeros((6, 4, 5)), [1.0] * 6)
    with pytest.raises(ShapeMismatch):
        stage_loss(probs(np.zeros((6, 4, 4))), np.zeros((6, 4, 4)), [1.0] * 5)


def test_total_loss_sums_stages():
    rng = np.random.default_rng(3)
    target = (rng.random((1, 6, 5, 5)) > 0.5).astype(np.uint8)
    p1 = probs(rng.random((1, 6, 5, 5)))
    p2 = probs(rng.random((1, 6, 5, 5)))
    weights = LossWeights.default(2)
    expected = stage_loss(p1, target, weights.weights[0]).item() + stage_loss(p2, target, weights.weights[1]).item()
    assert total_loss([p1, p2], target, weights).item() == pytest.approx(expected, abs=1e-12)

    single = LossWeights.default(1)
    assert total_loss([p1], target, single).item() == pytest.approx(
        stage_loss(p1, target, single.weights[0]).item(), abs=1e-12)

    with pytest.raises(ConfigInvalid):
        total_loss([p1], target, weights)


def test_default_weights():
    assert LossWeights.default(1).weights == [[2.5, 0.7, 0.7, 0.7, 0.7, 0.7]]
    three = LossWeights.default(3).weights
    assert three[0] == three[1] == [1.0] * 6
    assert three[2][0] == 2.5
    with pytest.raises(ConfigInvalid):
        LossWeights([[1.0] * 5])
    with pytest.raises(ConfigInvalid):
        LossWeights([[1.0] * 5 + [-0.1]])


def test_threshold_rule():
    np.testing.assert_array_equal(threshold(np.array([0.6, 0.4, 0.5]), 0.5), [1, 0, 1])
    # multi-label: both channels may fire at one pixel
    pixel = np.array([[[0.8]], [[0.9]]])
    np.testing.assert_array_equal(threshold(pixel, 0.5)[:, 0, 0], [1, 1])
    with pytest.raises(ConfigInvalid):
        threshold(np.zeros(3), 1.0)
    with pytest.raises(ConfigInvalid):
        threshold(np.zeros(3), 0.0)


def test_dice_score_examples():
    x = np.zeros((4, 4), dtype=np.uint8)
    x[1:3, 1:3] = 1
    assert dice_score(x, x) == 1.0
    assert dice_score(x, 1 - x) == 0.0
    assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    pred = np.zeros(10, dtype=np.uint8)
    target = np.zeros(10, dtype=np.uint8)
    pred[[0, 1, 2, 3]] = 1
    target[[1, 2, 3, 4, 5, 6]] = 1
    assert dice_score(pred, target) == pytest.approx(0.6)
    assert dice_score(target, pred) == dice_score(pred, target)


def test_binary_loss_and_score_agree():
    rng = np.random.default_rng(4)
    for _ in range(20):
        pred = (rng.random((6, 6)) > 0.5).astype(np.float64)
        target = (rng.random((6, 6)) > 0.4).astype(np.uint8)
        total = dice_loss(probs(pred), target).item() + dice_score(threshold(pred, 0.5), target)
        assert total == pytest.approx(1.0, abs=1e-5)


def test_confusion_counts():
    ones = np.ones((2, 2))
    assert confusion_counts(ones, ones) == (4, 0, 0, 0)
    assert confusion_counts(ones, np.zeros((2, 2))) == (0, 4, 0, 0)

    rng = np.random.default_rng(5)
    pred = rng.random((8, 8)) > 0.5
    target = rng.random((8, 8)) > 0.5
    tp = fp = tn = fn = 0
    for p, t in zip(pred.ravel(), target.ravel()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    assert confusion_counts(pred, target) == (tp, fp, tn, fn)
    assert sum(confusion_counts(pred, target)) == 64


def test_macro_dice_averages_per_image():
    full = np.ones((6, 2, 2), dtype=np.uint8)
    empty = np.zeros((6, 2, 2), dtype=np.uint8)
    np.testing.assert_array_equal(per_region_dice(full, full), np.ones(6))
    scores = macro_dice([full, empty], [full, full])
    np.testing.assert_allclose(scores, np.full(6, 0.5))
    with pytest.raises(EmptyDataset):
        macro_dice([], [])
