#!/usr/bin/env python3
"""
Tests for the preprocessing ensemble network.
"""

import math

import numpy as np
import pytest

import imgproc
from errors import ConfigInvalid, ShapeMismatch
from nncore import CHECK_DTYPE, AdamWState, Tape, Tensor, adamw_step, backward, max_relative_error, mul, \
    numerical_gradient, tsum
from pen import (
    PEN_KERNEL,
    PEN_OUT_CHANNELS,
    PenConfig,
    PenWeights,
    enhance,
    pen_apply_algorithms,
    pen_forward,
    pen_init,
    pen_stack_batch,
    replicate_gray,
)


def random_image(seed, size=32):
    return np.random.default_rng(seed).integers(0, 256, size=(size, size), dtype=np.uint8)


def test_default_config_has_five_pipelines():
    config = PenConfig()
    assert config.num_inputs == 5
    assert config.enabled


def test_algorithm_stack_channels():
    img = random_image(1)
    stack = pen_apply_algorithms(img, PenConfig())
    assert stack.shape == (5, 32, 32)
    np.testing.assert_array_equal(stack[0], img / 255.0)
    np.testing.assert_array_equal(stack[1], imgproc.laplacian_sharpen(img) / 255.0)
    assert stack.min() >= 0.0 and stack.max() <= 1.0


def test_constant_image_gives_constant_channels():
    stack = pen_apply_algorithms(np.full((32, 32), 120, dtype=np.uint8), PenConfig())
    for channel in stack:
        assert len(np.unique(channel)) == 1


def test_stack_batch_matches_per_image_and_workers():
    images = [random_image(s) for s in range(4)]
    serial = pen_stack_batch(images, PenConfig(), workers=1, dtype=CHECK_DTYPE)
    threaded = pen_stack_batch(images, PenConfig(), workers=3, dtype=CHECK_DTYPE)
    np.testing.assert_array_equal(serial, threaded)
    np.testing.assert_array_equal(serial[2], pen_apply_algorithms(images[2], PenConfig()))


def test_zero_weights_give_zero_output():
    stack = Tensor(pen_stack_batch([random_image(2)], PenConfig(), dtype=CHECK_DTYPE), dtype=CHECK_DTYPE)
    weights = PenWeights(weight=Tensor(np.zeros((3, 5, 7, 7)), dtype=CHECK_DTYPE),
                         bias=Tensor(np.zeros(3), dtype=CHECK_DTYPE))
    np.testing.assert_array_equal(pen_forward(stack, weights).values, 0.0)


def test_center_tap_kernel_passes_identity_channel():
    img = random_image(3)
    stack = Tensor(pen_stack_batch([img], PenConfig(), dtype=CHECK_DTYPE), dtype=CHECK_DTYPE)
    kernel = np.zeros((3, 5, 7, 7))
    kernel[:, 0, 3, 3] = 1.0
    weights = PenWeights(weight=Tensor(kernel, dtype=CHECK_DTYPE), bias=Tensor(np.zeros(3), dtype=CHECK_DTYPE))
    out = pen_forward(stack, weights).values[0]
    assert out.shape == (PEN_OUT_CHANNELS, 32, 32)
    for channel in out:
        np.testing.assert_allclose(channel, img / 255.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_pen_weight_gradients(seed):
    stack = Tensor(pen_stack_batch([random_image(seed, 12)], PenConfig(), dtype=CHECK_DTYPE), dtype=CHECK_DTYPE)
    weights = pen_init(PenConfig(), seed, dtype=CHECK_DTYPE)
    weights.bias.values[...] = 5.0  # keeps every ReLU active

    def scalar():
        return float(pen_forward(stack, weights).values.sum())

    with Tape() as tape:
        backward(tsum(pen_forward(stack, weights)), tape)
    for p in (weights.weight, weights.bias):
        numeric = numerical_gradient(scalar, p.values)
        assert max_relative_error(p.grad, numeric, floor=1e-3) <= 1e-4


def test_init_is_seeded_he_normal():
    a = pen_init(PenConfig(), 0)
    b = pen_init(PenConfig(), 0)
    np.testing.assert_array_equal(a.weight.values, b.weight.values)
    assert a.weight.shape == (3, 5, PEN_KERNEL, PEN_KERNEL)
    np.testing.assert_array_equal(a.bias.values, 0.0)

    expected = math.sqrt(2.0 / 245)
    assert abs(float(a.weight.values.std()) - expected) <= 0.2 * expected
    assert not np.array_equal(pen_init(PenConfig(), 1).weight.values, a.weight.values)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_output_is_three_nonnegative_channels(n):
    config = PenConfig(pipelines=imgproc.default_pipelines()[:n])
    stack = Tensor(pen_stack_batch([random_image(n), random_image(n + 10)], config))
    out = pen_forward(stack, pen_init(config, n))
    assert out.shape == (2, PEN_OUT_CHANNELS, 32, 32)
    assert (out.values >= 0).all()


def test_channel_count_mismatch():
    stack = Tensor(np.zeros((1, 4, 16, 16)))
    with pytest.raises(ShapeMismatch):
        pen_forward(stack, pen_init(PenConfig(), 0))


def test_one_step_changes_pen_weights():
    config = PenConfig()
    weights = pen_init(config, 0, dtype=CHECK_DTYPE)
    before = weights.weight.values.copy()
    stack = Tensor(pen_stack_batch([random_image(4)], config, dtype=CHECK_DTYPE), dtype=CHECK_DTYPE)
    target = np.random.default_rng(0).random((1, 3, 32, 32))
    with Tape() as tape:
        out = pen_forward(stack, weights)
        backward(tsum(mul(out, target)), tape)
    params = dict(weights.named_parameters())
    adamw_step(params, {name: p.grad for name, p in params.items()}, AdamWState(), lr=1e-3)
    assert not np.array_equal(weights.weight.values, before)


def test_without_pen_replicates_gray():
    config = PenConfig.without_pen()
    assert not config.enabled and config.num_inputs == 1
    img = random_image(6)
    stack = Tensor(pen_stack_batch([img], config, dtype=CHECK_DTYPE), dtype=CHECK_DTYPE)
    out = enhance(stack, None).values[0]
    for channel in out:
        np.testing.assert_array_equal(channel, img / 255.0)
    with pytest.raises(ShapeMismatch):
        replicate_gray(Tensor(np.zeros((1, 2, 8, 8))))


def test_config_tokens_and_dict():
    config = PenConfig.from_tokens(["identity", "clahe,sharpen"], imgproc.ClaheParams(tiles_x=4, tiles_y=4))
    assert config.num_inputs == 2
    assert config.to_dict()["pipelines"] == ["identity", "clahe,sharpen"]
    assert PenConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ConfigInvalid):
        PenConfig(pipelines=())
