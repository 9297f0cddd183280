import itertools
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mrcnet.errors import ConfigError
from mrcnet.losses import (
    SEG_VARIANTS, LossConfig, bce_loss, composite_generator_loss, dice_loss, gan_discriminator_loss,
    gan_generator_loss, jaccard_loss, seg_loss,
)
from oracles import central_difference, grad_close

EPS = 1e-6
t = torch.tensor


def _maps(seed=0, shape=(1, 1, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    pred = (torch.rand(shape, generator=g, dtype=torch.float64) * 0.98 + 0.01)
    target = (torch.rand(shape, generator=g, dtype=torch.float64) > 0.6).double()
    return pred, target


class TestClosedForms:
    def test_bce(self):
        assert float(bce_loss(torch.ones(4, 4), torch.ones(4, 4))) <= 2 * EPS
        target = (torch.arange(16).view(4, 4) % 3 == 0).double()
        assert float(bce_loss(torch.full((4, 4), 0.5, dtype=torch.float64), target)) == pytest.approx(
            math.log(2), abs=1e-12)
        assert float(bce_loss(t([0.9], dtype=torch.float64), t([1.0], dtype=torch.float64))) == pytest.approx(
            0.105361, abs=1e-6)

    def test_dice(self):
        y = t([1.0, 1.0, 0.0, 0.0])
        assert float(dice_loss(y, y)) == pytest.approx(0, abs=1e-6)
        assert float(dice_loss(t([0.0, 0.0, 1.0, 1.0]), y)) == pytest.approx(1, abs=1e-6)
        assert float(dice_loss(t([1.0, 0.0, 1.0, 0.0], dtype=torch.float64),
                               t([1.0, 1.0, 0.0, 0.0], dtype=torch.float64))) == pytest.approx(0.5, abs=1e-6)

    def test_jaccard(self):
        y = t([1.0, 1.0, 0.0, 0.0])
        assert float(jaccard_loss(y, y)) == pytest.approx(0, abs=1e-6)
        assert float(jaccard_loss(t([0.0, 0.0, 1.0, 1.0]), y)) == pytest.approx(1, abs=1e-6)
        assert float(jaccard_loss(t([1.0, 0.0, 1.0, 0.0], dtype=torch.float64),
                                  t([1.0, 1.0, 0.0, 0.0], dtype=torch.float64))) == pytest.approx(
            0.666667, abs=1e-6)

    def test_bce_dice_composition(self):
        pred = t([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
        target = t([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
        half = torch.full((4,), 0.5, dtype=torch.float64)
        cfg = LossConfig(gamma=0.5, seg_variant="bce_dice")
        expected = 0.5 * float(bce_loss(half, target)) + 0.5 * float(dice_loss(pred, target))
        assert expected == pytest.approx(0.596574, abs=1e-6)
        manual = cfg.gamma * bce_loss(half, target) + (1 - cfg.gamma) * dice_loss(pred, target)
        assert float(manual) == pytest.approx(0.596574, abs=1e-6)

    @pytest.mark.parametrize("variant", SEG_VARIANTS)
    def test_perfect_prediction(self, variant):
        y = t([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert float(seg_loss(y, y, LossConfig(seg_variant=variant))) == pytest.approx(0, abs=1e-5)

    def test_gan_discriminator(self):
        assert float(gan_discriminator_loss(t([1 - EPS]), t([EPS]))) == pytest.approx(0, abs=1e-5)
        assert float(gan_discriminator_loss(t([0.5], dtype=torch.float64), t([0.5], dtype=torch.float64))) == \
            pytest.approx(2 * math.log(2), abs=1e-12)
        assert float(gan_discriminator_loss(t([0.9], dtype=torch.float64), t([0.1], dtype=torch.float64))) == \
            pytest.approx(0.210721, abs=1e-6)

    def test_gan_generator(self):
        assert float(gan_generator_loss(t([1 - EPS]))) == pytest.approx(0, abs=1e-5)
        assert float(gan_generator_loss(t([0.5], dtype=torch.float64))) == pytest.approx(math.log(2), abs=1e-12)
        assert float(gan_generator_loss(t([0.1], dtype=torch.float64))) == pytest.approx(2.302585, abs=1e-6)

    def test_composite(self):
        # choose a seg term of exactly 0.1 through BCE: pred = exp(-0.1) on a positive pixel
        pred = t([math.exp(-0.1)], dtype=torch.float64)
        target = t([1.0], dtype=torch.float64)
        d_fake = t([0.5], dtype=torch.float64)
        value = composite_generator_loss(d_fake, pred, target, LossConfig(beta=10, seg_variant="bce"))
        assert float(value) == pytest.approx(1.693147, abs=1e-6)

    def test_beta_zero_is_gan_term(self):
        pred, target = _maps()
        d_fake = t([0.3, 0.7], dtype=torch.float64)
        a = composite_generator_loss(d_fake, pred, target, LossConfig(beta=0))
        assert torch.equal(a, gan_generator_loss(d_fake))

    def test_perfect_composite(self):
        y = t([[1.0, 0.0], [0.0, 1.0]])
        assert float(composite_generator_loss(t([1 - EPS]), y, y)) == pytest.approx(0, abs=1e-4)


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        {"beta": -1}, {"beta": float("inf")}, {"beta": float("nan")}, {"gamma": 1.5},
        {"smooth_eps": 0}, {"seg_variant": "focal"},
    ])
    def test_config_errors(self, kwargs):
        with pytest.raises(ConfigError):
            LossConfig(**kwargs)

    def test_shape_mismatch(self):
        for fn in (bce_loss, dice_loss, jaccard_loss):
            with pytest.raises(ConfigError):
                fn(torch.zeros(3), torch.zeros(4))


def _binary_maps_2x2():
    for bits in itertools.product((0.0, 1.0), repeat=4):
        yield torch.tensor(bits, dtype=torch.float64)


def test_jaccard_dice_identity_brute_force():
    checked = 0
    for a in _binary_maps_2x2():
        for b in _binary_maps_2x2():
            sa = {i for i in range(4) if a[i]}
            sb = {i for i in range(4) if b[i]}
            if not (sa or sb):
                continue
            d = 2 * len(sa & sb) / (len(sa) + len(sb))
            j = len(sa & sb) / len(sa | sb)
            assert abs(j - d / (2 - d)) < 1e-12
            dl = float(dice_loss(a, b, eps=1e-300))
            jl = float(jaccard_loss(a, b, eps=1e-300))
            assert abs(dl - (1 - d)) < 1e-12 and abs(jl - (1 - j)) < 1e-12
            assert abs(jl - (1 - (1 - dl) / (1 + dl))) < 1e-12
            checked += 1
    assert checked == 255


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.booleans(), min_size=4, max_size=4))
def test_range_and_ordering(p, y):
    pred = torch.tensor(p, dtype=torch.float64)
    target = torch.tensor(y, dtype=torch.float64)
    d = float(dice_loss(pred, target))
    j = float(jaccard_loss(pred, target))
    assert -1e-12 <= d <= 1 + 1e-12 and -1e-12 <= j <= 1 + 1e-12
    assert j >= d - 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.lists(st.booleans(), min_size=6, max_size=6),
       st.integers(0, 5), st.floats(0, 1))
def test_monotone_on_positive_pixels(p, y, k, bump):
    y[k] = True
    pred = torch.tensor(p, dtype=torch.float64)
    target = torch.tensor(y, dtype=torch.float64)
    raised = pred.clone()
    raised[k] = max(float(pred[k]), bump)
    assert float(dice_loss(raised, target)) <= float(dice_loss(pred, target)) + 1e-12
    assert float(jaccard_loss(raised, target)) <= float(jaccard_loss(pred, target)) + 1e-12


@pytest.mark.parametrize("name,fn", [
    ("bce", lambda p, y: bce_loss(p, y)),
    ("dice", lambda p, y: dice_loss(p, y)),
    ("jaccard", lambda p, y: jaccard_loss(p, y)),
    *[(v, lambda p, y, v=v: seg_loss(p, y, LossConfig(seg_variant=v))) for v in SEG_VARIANTS],
])
def test_gradients_wrt_pred(name, fn):
    pred, target = _maps(seed=len(name))
    pred.requires_grad_(True)
    fn(pred, target).backward()
    numeric = central_difference(lambda: fn(pred, target), pred)
    assert grad_close(pred.grad, numeric), name


def test_composite_gradient():
    pred, target = _maps(seed=9)
    d_fake = torch.tensor([0.3], dtype=torch.float64, requires_grad=True)
    pred.requires_grad_(True)
    cfg = LossConfig(beta=10)

    def value():
        return composite_generator_loss(d_fake, pred, target, cfg)

    value().backward()
    assert grad_close(pred.grad, central_difference(value, pred))
    assert grad_close(d_fake.grad, central_difference(value, d_fake))
