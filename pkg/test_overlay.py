#!/usr/bin/env python3
"""
Tests for overlay and heatmap rendering.
"""

import numpy as np
import pytest
from PIL import Image

from errors import ShapeMismatch
from losses import confusion_counts
from overlay import (
    FN_COLOR,
    FP_COLOR,
    TP_COLOR,
    blend,
    heatmap_to_rgb,
    render_overlay,
    render_prediction,
    save_panel,
    save_rgb,
)


def count_color(rgb, color):
    return int((rgb == np.array(color, dtype=np.uint8)).all(axis=-1).sum())


def test_overlay_colors_match_confusion_counts():
    rng = np.random.default_rng(0)
    # gray values 10..200 never collide with the pure overlay colors
    image = rng.integers(10, 200, (16, 16), dtype=np.uint8)
    pred = rng.random((16, 16)) > 0.5
    target = rng.random((16, 16)) > 0.5
    rgb = render_overlay(image, pred, target)
    tp, fp, tn, fn = confusion_counts(pred, target)
    assert count_color(rgb, TP_COLOR) == tp
    assert count_color(rgb, FP_COLOR) == fp
    assert count_color(rgb, FN_COLOR) == fn
    untouched = ~pred & ~target
    np.testing.assert_array_equal(rgb[untouched][:, 0], image[untouched])
    assert int(untouched.sum()) == tn


def test_perfect_prediction_is_blue_and_gray():
    image = np.full((8, 8), 100, dtype=np.uint8)
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 2:5] = 1
    rgb = render_overlay(image, mask, mask)
    assert count_color(rgb, TP_COLOR) == 9
    assert count_color(rgb, (100, 100, 100)) == 55


def test_everything_predicted_on_empty_truth_is_green():
    image = np.zeros((6, 6), dtype=np.uint8)
    rgb = render_overlay(image, np.ones((6, 6)), np.zeros((6, 6)))
    assert count_color(rgb, FP_COLOR) == 36


def test_overlay_shape_check():
    with pytest.raises(ShapeMismatch):
        render_overlay(np.zeros((4, 4), dtype=np.uint8), np.zeros((4, 5)), np.zeros((4, 4)))


def test_prediction_only_overlay():
    pred = np.eye(4, dtype=np.uint8)
    rgb = render_prediction(np.zeros((4, 4), dtype=np.uint8), pred)
    assert count_color(rgb, TP_COLOR) == 4


def test_heatmap_ramp():
    assert heatmap_to_rgb(np.array(1.0)).tolist() == [230, 20, 20]
    assert heatmap_to_rgb(np.array(0.0)).tolist() == [68, 1, 84]
    assert heatmap_to_rgb(np.array(2.0)).tolist() == [230, 20, 20]
    ramp = heatmap_to_rgb(np.linspace(0.0, 1.0, 11).reshape(1, 11))
    assert ramp.shape == (1, 11, 3) and ramp.dtype == np.uint8


def test_blend_halfway():
    image = np.full((2, 2), 100, dtype=np.uint8)
    color = np.full((2, 2, 3), 200, dtype=np.uint8)
    np.testing.assert_array_equal(blend(image, color, 0.5), 150)
    np.testing.assert_array_equal(blend(image, color, 0.0), 100)


def test_save_rgb_and_panel(tmp_path):
    tile = np.zeros((10, 12, 3), dtype=np.uint8)
    save_rgb(str(tmp_path / "tile.png"), tile)
    with Image.open(tmp_path / "tile.png") as img:
        assert img.size == (12, 10) and img.mode == "RGB"
    with pytest.raises(ShapeMismatch):
        save_rgb(str(tmp_path / "bad.png"), np.zeros((10, 12), dtype=np.uint8))

    panel_path = tmp_path / "out" / "panel.png"
    save_panel(str(panel_path), [tile, tile, tile], ["a", "b", "c"], scale=2, caption_height=16)
    with Image.open(panel_path) as img:
        assert img.size == (3 * 24, 20 + 16)
    with pytest.raises(ShapeMismatch):
        save_panel(str(panel_path), [])
