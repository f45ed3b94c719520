#!/usr/bin/env python3
"""
Tests for the cascaded segmentation network: structure, context wiring and prediction.
"""

import itertools
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from cin import (
    DEFAULT_CONTEXT,
    REGIONS,
    CinConfig,
    Stage,
    StageConfig,
    build_model,
    cin_forward,
    peci_forward,
    predict,
    region_index,
    stage_forward,
)
from config import load_run_config
from errors import ConfigInvalid, ShapeMismatch
from nncore import CHECK_DTYPE, Tape, Tensor, backward, max_relative_error, numerical_gradient, tsum
from pen import PenConfig, pen_stack_batch


def random_input(shape, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).random(shape).astype(dtype), dtype=dtype)


def zero_head(model):
    for stage in model.stages:
        stage.head.weight.values[...] = 0.0
        stage.head.bias.values[...] = 0.0


def test_default_model_structure():
    model = build_model(CinConfig())
    assert model.num_stages == 2
    assert model.config.context_sets() == (DEFAULT_CONTEXT,)
    assert [s.config.in_channels for s in model.stages] == [3, 5]
    assert model.stages[1].encoder[0].down.conv.weight.shape[1] == 5
    assert model.context_indices == [(region_index("cervical_spine"), region_index("mandible"))]
    assert model.pen is not None and model.pen.num_inputs == 5


def test_single_stage_has_no_context():
    model = build_model(CinConfig(num_stages=1))
    assert model.config.context_sets() == ()
    assert model.context_indices == []
    assert len(cin_forward(model, random_input((1, 3, 64, 64)))) == 1


def test_channel_law_over_random_contexts():
    rng = np.random.default_rng(0)
    subsets = [c for r in range(1, 7) for c in itertools.combinations(REGIONS, r)]
    for _ in range(50):
        stages = int(rng.integers(2, 6))
        contexts = tuple(subsets[int(rng.integers(len(subsets)))] for _ in range(stages - 1))
        widths = [s.in_channels for s in CinConfig(num_stages=stages, contexts=contexts).stage_configs()]
        assert widths == [3] + [3 + len(c) for c in contexts]


def test_all_regions_context_gives_nine_channels():
    config = CinConfig(contexts=(REGIONS,), image_size=32)
    model = build_model(config)
    assert model.stages[1].config.in_channels == 9


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        CinConfig(num_stages=0).validate()
    with pytest.raises(ConfigInvalid):
        CinConfig(contexts=((),)).validate()
    with pytest.raises(ConfigInvalid):
        CinConfig(contexts=(("mandible", "mandible"),)).validate()
    with pytest.raises(ConfigInvalid):
        CinConfig(contexts=(("tongue",),)).validate()
    with pytest.raises(ConfigInvalid):
        CinConfig(num_stages=3, contexts=(DEFAULT_CONTEXT,)).validate()
    with pytest.raises(ConfigInvalid):
        build_model(CinConfig(preset="huge"))
    with pytest.raises(ConfigInvalid):
        region_index("tongue")


def test_presets():
    mini = StageConfig.mini()
    assert mini.image_size == 64 and mini.token_grid == 8
    assert mini.encoder_channels == (16, 32, 64)
    assert (mini.hidden_size, mini.num_layers, mini.num_heads) == (64, 2, 4)

    full = StageConfig.from_preset("paper", 3)
    assert full == StageConfig.paper()
    assert full.preset == "paper"
    assert full.image_size == 224 and full.token_grid == 14
    assert (full.hidden_size, full.num_layers, full.num_heads) == (768, 12, 12)
    assert full.decoder_channels[-1] == 16
    full.validate()

    with pytest.raises(ConfigInvalid):
        StageConfig.from_preset("large", 3)


def test_paper_preset_from_run_config():
    config = load_run_config(overrides={"cin": {"preset": "paper", "image_size": 224}}).cin
    widths = [s.in_channels for s in config.stage_configs()]
    assert widths == [3, 5]
    assert all(s.token_grid == 14 and s.num_layers == 12 for s in config.stage_configs())


def test_mini_stage_output_shape():
    model = build_model(CinConfig())
    outputs = cin_forward(model, random_input((2, 3, 64, 64)))
    for logits, probs in outputs:
        assert logits.shape == (2, 6, 64, 64)
        assert ((probs.values > 0) & (probs.values < 1)).all()


def test_stage_rejects_wrong_input():
    stage = Stage(StageConfig.mini(image_size=32), np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        stage(random_input((1, 4, 32, 32)))
    with pytest.raises(ShapeMismatch):
        stage(random_input((1, 3, 64, 64)))


def test_zeroed_head_gives_zero_logits():
    model = build_model(CinConfig(image_size=32))
    zero_head(model)
    logits = stage_forward(model.stages[0], random_input((1, 3, 32, 32)))
    np.testing.assert_array_equal(logits.values, 0.0)


def test_forward_is_deterministic():
    first = cin_forward(build_model(CinConfig(image_size=32, seed=3)), random_input((1, 3, 32, 32)))
    second = cin_forward(build_model(CinConfig(image_size=32, seed=3)), random_input((1, 3, 32, 32)))
    for (a, _), (b, _) in zip(first, second):
        np.testing.assert_array_equal(a.values, b.values)


def test_excluded_context_channel_does_not_reach_stage_two():
    model = build_model(CinConfig(image_size=32))
    x_bar = random_input((1, 3, 32, 32))
    soft = region_index("soft_tissue")
    mandible = region_index("mandible")

    def bump(channel):
        def hook(i, logits):
            values = logits.values.copy()
            values[:, channel] += 100.0
            return Tensor(values, dtype=values.dtype)
        return hook

    plain_inputs, bumped_inputs, context_inputs = [], [], []
    plain = cin_forward(model, x_bar, stage_inputs=plain_inputs)
    bumped = cin_forward(model, x_bar, logit_hook=bump(soft), stage_inputs=bumped_inputs)
    cin_forward(model, x_bar, logit_hook=bump(mandible), stage_inputs=context_inputs)

    np.testing.assert_array_equal(plain_inputs[1].values, bumped_inputs[1].values)
    np.testing.assert_array_equal(plain[1][0].values, bumped[1][0].values)
    assert not np.array_equal(plain_inputs[1].values, context_inputs[1].values)


def test_context_carries_raw_logits():
    model = build_model(CinConfig(image_size=32))
    x_bar = random_input((1, 3, 32, 32))
    inputs = []
    outputs = cin_forward(model, x_bar, stage_inputs=inputs)
    expected = outputs[0][0].values[:, list(model.context_indices[0])]
    np.testing.assert_array_equal(inputs[1].values[:, 3:], expected)
    np.testing.assert_array_equal(inputs[1].values[:, :3], x_bar.values)


def test_sigmoid_outputs_are_not_a_partition():
    model = build_model(CinConfig(image_size=32))
    zero_head(model)
    probs = cin_forward(model, random_input((1, 3, 32, 32)))[-1][1].values
    assert (probs.sum(axis=1) > 1.0).all()


def test_predict_tie_counts_as_positive():
    model = build_model(CinConfig(image_size=32))
    zero_head(model)
    img = np.random.default_rng(0).integers(0, 256, (32, 32), dtype=np.uint8)
    masks, probs = predict(model, img, 0.5)
    assert masks.shape == probs.shape == (6, 32, 32)
    np.testing.assert_array_equal(probs, 0.5)
    np.testing.assert_array_equal(masks, 1)


def test_peci_forward_matches_predict():
    model = build_model(CinConfig(image_size=32))
    img = np.random.default_rng(1).integers(0, 256, (32, 32), dtype=np.uint8)
    stack = Tensor(pen_stack_batch([img], model.pen_config))
    probs = peci_forward(model, stack)[-1][1].values[0]
    _, predicted = predict(model, img)
    np.testing.assert_array_equal(probs, predicted)


def test_gray_replication_needs_one_pipeline():
    model = build_model(CinConfig(image_size=32), PenConfig.without_pen())
    assert model.pen is None
    with pytest.raises(ConfigInvalid):
        build_model(CinConfig(image_size=32), PenConfig(enabled=False))


@pytest.mark.parametrize("seed", range(3))
def test_stage_gradient_wrt_encoder_weight(seed):
    # a narrow stage keeps the number of ReLU kinks the finite-difference step can cross small
    config = StageConfig(image_size=16, encoder_channels=(4, 8), hidden_size=8, num_layers=1, num_heads=2,
                         mlp_dim=16, head_channels=8, decoder_channels=(8, 4, 4, 4))
    stage = Stage(config, np.random.default_rng(seed), dtype=CHECK_DTYPE)
    x = Tensor(np.random.default_rng(seed).random((1, 3, 16, 16)), dtype=CHECK_DTYPE)
    weight = stage.encoder[0].down.conv.weight
    coords = [tuple(int(i) for i in np.unravel_index(k, weight.shape))
              for k in np.random.default_rng(seed).choice(weight.values.size, 8, replace=False)]

    with Tape() as tape:
        backward(tsum(stage(x)), tape)
    numeric = numerical_gradient(lambda: float(stage(x).values.sum()), weight.values, h=1e-7, coords=coords)
    analytic = np.zeros_like(numeric)
    for c in coords:
        analytic[c] = weight.grad[c]
    assert max_relative_error(analytic, numeric, floor=1e-3) <= 1e-4


def test_concurrent_predict_matches_sequential():
    model = build_model(CinConfig(image_size=32))
    images = [np.random.default_rng(s).integers(0, 256, (32, 32), dtype=np.uint8) for s in range(6)]
    sequential = [predict(model, img)[1] for img in images]
    with ThreadPoolExecutor(max_workers=3) as pool:
        threaded = list(pool.map(lambda img: predict(model, img)[1], images))
    for a, b in zip(sequential, threaded):
        np.testing.assert_array_equal(a, b)
    assert all(block.last_attention is None for stage in model.stages for block in stage.blocks)
