import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdistill.exceptions import ConfigurationError, ContractError
from gpdistill.losses import (
    AdvTerm,
    LossWeights,
    combined_adv_loss,
    combined_per_loss,
    lsgan_d_loss,
    lsgan_g_loss,
    perceptual_from_features,
    perceptual_loss,
    total_loss,
)
from gpdistill.nets import FeatureExtractorSpec, build_feature_extractor

W = LossWeights()


def full(v, shape=(2, 1, 3, 3)):
    return torch.full(shape, float(v), dtype=torch.float64)


def test_default_weights():
    assert (W.lambda1, W.lambda2, W.mu) == (1.0, 1.0, 5.0)
    assert (W.lsgan_real_label, W.lsgan_fake_label) == (1.0, 0.0)


def test_negative_weights_rejected():
    with pytest.raises(ConfigurationError):
        LossWeights(mu=-1)


@pytest.mark.parametrize("real, fake, expected", [(1, 0, 0.0), (0.5, 0.5, 0.5), (0, 1, 2.0)])
def test_lsgan_d_loss(real, fake, expected):
    assert float(lsgan_d_loss(full(real), full(fake), W)) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("fake, expected", [(1, 0.0), (0, 1.0), (0.5, 0.25)])
def test_lsgan_g_loss(fake, expected):
    assert float(lsgan_g_loss(full(fake), W)) == pytest.approx(expected, abs=1e-15)


def test_literal_labels_swap_targets():
    lit = LossWeights.literal()
    assert float(lsgan_d_loss(full(0), full(1), lit)) == 0.0
    assert float(lsgan_g_loss(full(0), lit)) == 0.0


def test_lsgan_empty_batch():
    with pytest.raises(ContractError):
        lsgan_d_loss(torch.zeros(0), torch.zeros(3))


def test_lsgan_brute_force():
    g = torch.Generator().manual_seed(0)
    real = torch.randn(2, 1, 3, 4, generator=g, dtype=torch.float64)
    fake = torch.randn(2, 1, 3, 4, generator=g, dtype=torch.float64)
    r, f = real.numpy().ravel().tolist(), fake.numpy().ravel().tolist()
    expect_d = sum((v - 1.0) ** 2 for v in r) / len(r) + sum(v**2 for v in f) / len(f)
    expect_g = sum((v - 1.0) ** 2 for v in f) / len(f)
    assert abs(float(lsgan_d_loss(real, fake)) - expect_d) < 1e-12
    assert abs(float(lsgan_g_loss(fake)) - expect_g) < 1e-12


# -- perceptual --------------------------------------------------------------


def test_perceptual_identical_is_zero():
    ext = build_feature_extractor()
    x = torch.rand(2, 3, 32, 32)
    assert float(perceptual_loss(x, x.clone(), ext)) == 0.0


def test_perceptual_unit_difference_normalizes_to_one():
    fx = {1: torch.zeros(1, 4, 5, 6, dtype=torch.float64)}
    fy = {1: torch.ones(1, 4, 5, 6, dtype=torch.float64)}
    assert float(perceptual_from_features(fx, fy)) == 1.0


def test_perceptual_brute_force_2x2x2():
    g = torch.Generator().manual_seed(3)
    a = torch.randn(1, 2, 2, 2, generator=g, dtype=torch.float64)
    b = torch.randn(1, 2, 2, 2, generator=g, dtype=torch.float64)
    c, h, w = 2, 2, 2
    brute = 0.0
    for i, j, k in itertools.product(range(c), range(h), range(w)):
        brute += abs(a[0, i, j, k].item() - b[0, i, j, k].item())
    brute /= c * h * w
    assert abs(float(perceptual_from_features({1: a}, {1: b})) - brute) < 1e-12


def test_perceptual_sums_over_taps():
    ext = build_feature_extractor(FeatureExtractorSpec(layer_taps=(2, 4)))
    x, y = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    fx, fy = ext(x), ext(y)
    per_tap = [float((fx[j] - fy[j]).abs().mean()) for j in (2, 4)]
    assert float(perceptual_loss(x, y, ext)) == pytest.approx(sum(per_tap), rel=1e-6)
    assert float(perceptual_loss(x, y, ext, taps=(2,))) == pytest.approx(per_tap[0], rel=1e-6)


def test_perceptual_shape_mismatch():
    ext = build_feature_extractor()
    with pytest.raises(ContractError):
        perceptual_loss(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 32, 32), ext)


# -- composition -------------------------------------------------------------


def test_combined_adv_arithmetic():
    out = combined_adv_loss(AdvTerm(0.4, "fine"), AdvTerm(0.6, "coarse"), W)
    assert out == pytest.approx(1.0, abs=1e-15)
    assert combined_adv_loss(AdvTerm(0.4, "fine"), AdvTerm(0.6, "coarse"), LossWeights(lambda1=0)) == 0.4


def test_combined_adv_routing_violation():
    with pytest.raises(ContractError):
        combined_adv_loss(AdvTerm(0.4, "coarse"), None, W)
    with pytest.raises(ContractError):
        combined_adv_loss(None, AdvTerm(0.4, "fine"), W)


def test_combined_per_arithmetic():
    assert combined_per_loss(0.2, 0.3, W) == pytest.approx(0.5, abs=1e-15)
    assert combined_per_loss(0.2, 0.3, LossWeights(lambda2=0)) == 0.2


def test_total_loss_arithmetic():
    assert total_loss(0.5, 0.2, W) == pytest.approx(1.5, abs=1e-15)
    assert total_loss(0.5, 0.0, W) == 0.5


@settings(max_examples=50, deadline=None)
@given(
    l1=st.floats(0, 10), l2=st.floats(0, 10), mu=st.floats(0, 10),
    a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5), d=st.floats(-5, 5),
)
def test_composition_is_affine(l1, l2, mu, a, b, c, d):
    w = LossWeights(lambda1=l1, lambda2=l2, mu=mu)
    adv = combined_adv_loss(AdvTerm(a, "fine"), AdvTerm(b, "coarse"), w)
    per = combined_per_loss(c, d, w)
    assert total_loss(adv, per, w) == pytest.approx(a + l1 * b + mu * (c + l2 * d), abs=1e-9)
