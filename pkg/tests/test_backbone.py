"""Backbone contracts: pyramid shapes, prompt tokens, decoder behavior."""

import numpy as np
import pytest

from seglora import numerics as nm
from seglora.backbone import (DecoderConfig, EncoderConfig, PromptError,
                              PromptSet, build_model, pad_to_multiple)
from seglora.losses import composite_loss
from seglora.numerics import ShapeError, Tensor, gradient_check


@pytest.fixture(scope="module")
def model():
    return build_model(seed=0)


def rand_image(size, seed=0, w=None):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(3, size, w or size)).astype(np.float32)


class TestEncodeImage:
    def test_default_shapes_at_256(self, model):
        feats = model.encoder(Tensor(rand_image(256)))
        shapes = [f.shape for f in feats]
        assert shapes == [(32, 64, 64), (64, 32, 32), (128, 16, 16), (256, 8, 8)]

    def test_indivisible_input_rejected_naming_multiple(self, model):
        with pytest.raises(ShapeError, match="32"):
            model.encoder(Tensor(rand_image(100, w=96)))

    def test_1000px_rejected_with_1024_padding_hint(self, model):
        with pytest.raises(ShapeError, match="1024"):
            model.encoder(Tensor(np.zeros((3, 1000, 1000), dtype=np.float32)))
        assert pad_to_multiple(1000) == 1024

    def test_padding_path_stride_consistent(self, model):
        # Non-multiple-of-32 inputs are padded then cropped after decoding.
        img = rand_image(70, w=100)
        logits = model(Tensor(img))
        assert logits.shape == (1, 70, 100)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            EncoderConfig(stage_dims=(32, 64, 64, 256))
        with pytest.raises(ValueError):
            EncoderConfig(stage_depths=(1, 1, 2))

    def test_doubling_size_changes_only_spatial_dims(self, model):
        f64 = model.encoder(Tensor(rand_image(64)))
        f128 = model.encoder(Tensor(rand_image(128)))
        for a, b in zip(f64, f128):
            assert a.shape[0] == b.shape[0]
            assert b.shape[1] == 2 * a.shape[1] and b.shape[2] == 2 * a.shape[2]


class TestEncodePrompts:
    def test_empty_prompt_set_yields_single_token(self, model):
        tokens = model.prompt_encoder(PromptSet(), (64, 64))
        assert tokens.shape == (1, model.decoder_cfg.token_dim)

    def test_five_positive_one_negative(self, model):
        p = PromptSet(positive_points=tuple((float(i), float(i)) for i in range(5)),
                      negative_points=((10.0, 12.0),))
        tokens = model.prompt_encoder(p, (64, 64))
        assert tokens.shape[0] == 6  # one per point; no-prompt token excluded
        # with the decoder's mask token prepended this becomes 7 tokens
        assert tokens.shape[0] + model.decoder_cfg.num_mask_tokens == 7

    def test_single_box_gives_two_corner_tokens(self, model):
        tokens = model.prompt_encoder(PromptSet(boxes=((4.0, 6.0, 20.0, 30.0),)), (64, 64))
        assert tokens.shape[0] == 2

    def test_out_of_bounds_point_names_index(self, model):
        p = PromptSet(positive_points=((1.0, 2.0), (99.0, 5.0)))
        with pytest.raises(PromptError, match="point 1"):
            model.prompt_encoder(p, (64, 64))

    def test_degenerate_box_rejected(self):
        with pytest.raises(PromptError, match="box 0"):
            PromptSet(boxes=((10.0, 10.0, 10.0, 20.0),)).validate((64, 64))

    def test_empty_prompt_set_is_valid(self):
        PromptSet().validate((64, 64))
        assert PromptSet().is_empty


class TestDecodeMask:
    def test_output_shape_and_sigmoid_range(self, model):
        img = rand_image(64, seed=3)
        logits = model(Tensor(img))
        assert logits.shape == (1, 64, 64)
        probs = nm.sigmoid(logits).data
        assert (probs > 0.0).all() and (probs < 1.0).all()

    def test_bit_identical_across_runs(self, model):
        img = rand_image(64, seed=4)
        p = PromptSet(positive_points=((5.0, 9.0),), boxes=((2.0, 2.0, 30.0, 40.0),))
        a = model(Tensor(img), p).data
        b = model(Tensor(img), p).data
        assert np.array_equal(a, b)

    def test_positive_point_order_invariance(self, model):
        img = rand_image(64, seed=5)
        pts = ((3.0, 4.0), (10.0, 20.0), (40.0, 33.0), (17.0, 8.0), (50.0, 50.0))
        a = model(Tensor(img), PromptSet(positive_points=pts)).data
        b = model(Tensor(img), PromptSet(positive_points=pts[::-1])).data
        assert np.abs(a - b).max() < 1e-6

    def test_window_padding_sizes(self, model):
        # 96px: the stride-8/16 maps are not multiples of their window sizes,
        # exercising the pad-and-mask path.
        logits = model(Tensor(rand_image(96, seed=6)))
        assert logits.shape == (1, 96, 96)


def test_end_to_end_gradient_check():
    model = build_model(seed=1).astype(np.float64)
    rng = np.random.default_rng(7)
    target = Tensor((rng.random((64, 64)) > 0.8).astype(np.float64))
    prompts = PromptSet(positive_points=((12.0, 30.0),))

    def f(img):
        logits = model(img, prompts)
        probs = nm.sigmoid(nm.reshape(logits, (64, 64)))
        return composite_loss(probs, target)[0]

    x = Tensor(rng.normal(size=(3, 64, 64)))
    assert gradient_check(f, x, sample=48, seed=0) < 1e-4
