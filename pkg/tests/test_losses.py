"""Loss components against independent scalar-loop references."""

import math

import numpy as np
import pytest

from seglora import numerics as nm
from seglora.losses import (CompositeWeights, TverskyParams, bce_loss,
                            composite_loss, focal_tversky_loss, soft_dice_loss)
from seglora.numerics import Tensor, gradient_check

CLAMP = 1e-7
EPS = 1e-5


def bce_ref(pred, target):
    """Plain double-loop BCE with the same clamping."""
    total = 0.0
    n = 0
    for p_row, t_row in zip(pred, target):
        for p, t in zip(p_row, t_row):
            p = min(max(p, CLAMP), 1.0 - CLAMP)
            total += -(t * math.log(p) + (1.0 - t) * math.log(1.0 - p))
            n += 1
    return total / n


def dice_ref(pred, target, eps=EPS):
    inter = sp = st = 0.0
    for p_row, t_row in zip(pred, target):
        for p, t in zip(p_row, t_row):
            inter += p * t
            sp += p
            st += t
    return 1.0 - (2.0 * inter + eps) / (sp + st + eps)


def ftl_ref(pred, target, alpha_t=0.7, beta_t=0.3, gamma=4.0 / 3.0, eps=EPS):
    tp = fn = fp = 0.0
    for p_row, t_row in zip(pred, target):
        for p, t in zip(p_row, t_row):
            tp += p * t
            fn += (1.0 - p) * t
            fp += p * (1.0 - t)
    index = (tp + eps) / (tp + alpha_t * fn + beta_t * fp + eps)
    return (1.0 - index) ** gamma


def random_case(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(1e-4, 1.0 - 1e-4, size=(8, 8))
    if seed % 10 == 0:
        target = np.zeros((8, 8))  # class-imbalance edge: empty target
    else:
        target = (rng.random((8, 8)) > rng.uniform(0.3, 0.95)).astype(np.float64)
    return pred, target


class TestBce:
    def test_uniform_half_gives_log_two(self):
        pred = np.full((4, 4), 0.5)
        target = (np.random.default_rng(0).random((4, 4)) > 0.5).astype(np.float64)
        assert abs(float(bce_loss(Tensor(pred), Tensor(target)).data) - math.log(2.0)) < 1e-9

    def test_perfect_prediction_hits_clamp_floor(self):
        target = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = float(bce_loss(Tensor(target.copy()), Tensor(target)).data)
        assert loss <= -math.log(1.0 - CLAMP) + 1e-12
        assert loss > 0.0

    def test_two_pixel_case(self):
        loss = float(bce_loss(Tensor(np.array([[0.9, 0.1]])),
                              Tensor(np.array([[1.0, 0.0]]))).data)
        expected = -(math.log(0.9) + math.log(0.9)) / 2.0  # = 0.10536...
        assert abs(loss - expected) < 1e-12
        assert abs(expected - 0.10536051565782628) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(nm.ShapeError):
            bce_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


class TestSoftDice:
    def test_perfect_overlap(self):
        t = (np.random.default_rng(1).random((6, 6)) > 0.5).astype(np.float64)
        assert float(soft_dice_loss(Tensor(t.copy()), Tensor(t)).data) < 1e-5

    def test_empty_empty_is_zero(self):
        z = np.zeros((5, 5))
        assert float(soft_dice_loss(Tensor(z.copy()), Tensor(z)).data) == 0.0

    def test_half_overlap_four_pixels(self):
        pred = np.array([[0.5, 0.5, 0.5, 0.5]])
        target = np.array([[1.0, 1.0, 0.0, 0.0]])
        loss = float(soft_dice_loss(Tensor(pred), Tensor(target)).data)
        assert abs(loss - dice_ref(pred, target)) < 1e-12
        assert abs(loss - 0.5) < 1e-5

    def test_symmetry_for_binary_masks(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = (rng.random((7, 7)) > 0.6).astype(np.float64)
            t = (rng.random((7, 7)) > 0.4).astype(np.float64)
            a = float(soft_dice_loss(Tensor(p), Tensor(t)).data)
            b = float(soft_dice_loss(Tensor(t), Tensor(p)).data)
            assert abs(a - b) < 1e-12


class TestFocalTversky:
    def test_perfect_prediction(self):
        t = (np.random.default_rng(3).random((6, 6)) > 0.5).astype(np.float64)
        assert float(focal_tversky_loss(Tensor(t.copy()), Tensor(t)).data) < 1e-4

    def test_total_miss(self):
        t = (np.random.default_rng(4).random((6, 6)) > 0.5).astype(np.float64)
        loss = float(focal_tversky_loss(Tensor(1.0 - t), Tensor(t)).data)
        assert loss > 0.99

    def test_two_pixel_worked_example(self):
        pred = np.array([[0.5, 0.5]])
        target = np.array([[1.0, 0.0]])
        loss = float(focal_tversky_loss(Tensor(pred), Tensor(target)).data)
        # TI = (0.5+eps)/(0.5+0.35+0.15+eps) ~= 0.5; loss = 0.5^(4/3)
        assert abs(loss - ftl_ref(pred, target)) < 1e-12
        assert abs(loss - 0.5 ** (4.0 / 3.0)) < 1e-5
        assert abs(0.5 ** (4.0 / 3.0) - 0.3968502629920499) < 1e-12

    def test_params_validation(self):
        with pytest.raises(ValueError):
            TverskyParams(alpha_t=0.6, beta_t=0.3)
        with pytest.raises(ValueError):
            TverskyParams(gamma=0.0)


class TestComposite:
    def test_bce_only_weights(self):
        pred, target = random_case(5)
        total, parts = composite_loss(Tensor(pred), Tensor(target),
                                      CompositeWeights(1.0, 0.0, 0.0))
        assert float(total.data) == pytest.approx(parts["bce"], abs=1e-9)
        assert float(total.data) == pytest.approx(
            float(bce_loss(Tensor(pred), Tensor(target)).data), abs=1e-12)

    def test_ftl_only_weights(self):
        pred, target = random_case(6)
        total, _ = composite_loss(Tensor(pred), Tensor(target),
                                  CompositeWeights(0.0, 0.0, 1.0))
        assert float(total.data) == pytest.approx(
            float(focal_tversky_loss(Tensor(pred), Tensor(target)).data), abs=1e-12)

    def test_default_is_component_sum(self):
        pred = np.array([[0.5, 0.5]])
        target = np.array([[1.0, 0.0]])
        total, parts = composite_loss(Tensor(pred), Tensor(target))
        assert float(total.data) == pytest.approx(
            parts["bce"] + parts["dice"] + parts["ftl"], rel=1e-9)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            CompositeWeights(-0.1, 1.0, 1.0)


class TestScalarLoopOracles:
    def test_thousand_random_cases(self):
        worst = 0.0
        for seed in range(1000):
            pred, target = random_case(seed)
            p, t = Tensor(pred), Tensor(target)
            worst = max(worst, abs(float(bce_loss(p, t).data) - bce_ref(pred, target)))
            worst = max(worst, abs(float(soft_dice_loss(p, t).data) - dice_ref(pred, target)))
            worst = max(worst, abs(float(focal_tversky_loss(p, t).data) - ftl_ref(pred, target)))
        assert worst < 1e-10


class TestBounds:
    def test_upper_bounds_on_random_inputs(self):
        for seed in range(50):
            pred, target = random_case(seed)
            assert float(bce_loss(Tensor(pred), Tensor(target)).data) <= -math.log(CLAMP)
            assert float(soft_dice_loss(Tensor(pred), Tensor(target)).data) <= 1.0
            assert 0.0 <= float(focal_tversky_loss(Tensor(pred), Tensor(target)).data) <= 1.0


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients_including_empty_target(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.05, 0.95, size=(8, 8))
    target = np.zeros((8, 8)) if seed % 3 == 0 else \
        (rng.random((8, 8)) > 0.7).astype(np.float64)
    t = Tensor(target)
    assert gradient_check(lambda x: bce_loss(x, t), Tensor(pred)) < 1e-4
    assert gradient_check(lambda x: soft_dice_loss(x, t), Tensor(pred)) < 1e-4
    assert gradient_check(lambda x: focal_tversky_loss(x, t), Tensor(pred)) < 1e-4
    assert gradient_check(lambda x: composite_loss(x, t)[0], Tensor(pred)) < 1e-4
