from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oarseg import losses as L
from oracles import median_frequency_oracle
from suites import gradient_errors, median_frequency_cases, oracle_errors, reduction_identities


@pytest.fixture(scope="module")
def value_errors():
    return oracle_errors(seed=11)


@pytest.mark.parametrize("op", [
    "dice", "weighted_ce", "focal", "gdl", "gan_log_generator", "gan_log_discriminator",
    "gan_lsgan_generator", "gan_lsgan_discriminator", "content", "task", "total_objective",
])
def test_matches_naive_oracle(value_errors, op):
    assert value_errors[op] <= 1e-9


def test_gradients_match_finite_differences():
    errs = gradient_errors(seed=12, trials=10)
    assert max(errs.values()) <= 1e-4, errs


def test_reduction_identities_hold():
    assert all(reduction_identities(seed=13).values())


# ---------------------------------------------------------------- dice


def test_dice_of_two_empty_masks_is_one():
    assert L.dice_score(np.zeros(4), np.zeros(4)) == 1.0
    assert np.isnan(L.dice_score(np.zeros(4), np.zeros(4), empty_value=float("nan")))


def test_dice_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        L.dice_score(np.zeros((2, 2)), np.zeros((2, 3)))


@given(hnp.arrays(bool, (6, 6)), hnp.arrays(bool, (6, 6)))
def test_dice_is_symmetric_and_bounded(a, b):
    d = L.dice_score(a, b)
    assert d == L.dice_score(b, a)
    assert 0.0 <= d <= 1.0


# ---------------------------------------------------------------- class weighting


@pytest.mark.parametrize("i", [0, 1])
def test_median_frequency_known_corpora_are_exact(i):
    got, want = median_frequency_cases()[i]
    assert got == want


def test_median_frequency_uses_image_pixels_of_present_images_only():
    maps = [np.zeros((2, 2), int), np.array([[0, 1], [1, 1]])]
    w = L.median_frequency_weights(maps, 3)
    assert w.frequencies == {0: Fraction(5, 8), 1: Fraction(3, 4)}
    assert w.absent == (2,)
    assert np.isnan(float(w.as_tensor()[2]))


@given(st.lists(hnp.arrays(np.int64, (3, 4), elements=st.integers(0, 4)), min_size=1, max_size=4))
def test_median_frequency_matches_counting_oracle(maps):
    got = L.median_frequency_weights(maps, 5)
    want = median_frequency_oracle(maps, 5)
    assert got.weights == {k: float(v) for k, v in want.items()}


def test_missing_weight_for_present_class_is_an_error():
    w = L.median_frequency_weights([np.zeros((2, 2), int)], 3)
    with pytest.raises(ValueError, match="no class weight"):
        L.weighted_cross_entropy(torch.zeros(1, 3, 2, 2), torch.ones(1, 2, 2, dtype=torch.long), w)


# ---------------------------------------------------------------- input validation


def test_cross_entropy_rejects_label_out_of_range():
    with pytest.raises(ValueError):
        L.weighted_cross_entropy(torch.zeros(1, 2, 2, 2), torch.full((1, 2, 2), 2))


def test_cross_entropy_rejects_nonfinite_logits():
    x = torch.zeros(1, 2, 2, 2)
    x[0, 0, 0, 0] = float("inf")
    with pytest.raises(ValueError):
        L.weighted_cross_entropy(x, torch.zeros(1, 2, 2, dtype=torch.long))


def test_focal_rejects_negative_gamma():
    with pytest.raises(ValueError):
        L.focal_loss(torch.zeros(1, 2, 1, 1), torch.zeros(1, 1, 1, dtype=torch.long), gamma=-1)


def test_gdl_rejects_unnormalized_probabilities():
    with pytest.raises(ValueError):
        L.generalized_dice_loss(torch.full((1, 2, 2, 2), 0.7), torch.zeros(1, 2, 2, dtype=torch.long))


def test_gdl_perfect_prediction_is_zero():
    labels = torch.tensor([[[0, 1], [2, 1]]])
    probs = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double()
    assert float(L.generalized_dice_loss(probs, labels)) == pytest.approx(0.0, abs=1e-15)


def test_log_gan_rejects_values_outside_unit_interval():
    with pytest.raises(ValueError):
        L.generator_adversarial_loss(torch.tensor([1.5]), "log")
    with pytest.raises(ValueError):
        L.discriminator_loss(torch.tensor([0.5]), torch.tensor([0.5]), "wgan")


def test_log_gan_is_finite_at_saturation():
    g, d = L.gan_losses(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]), "log")
    assert torch.isfinite(g) and torch.isfinite(d)


def test_content_mask_must_be_binary_and_same_shape():
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError):
        L.content_consistency_loss(x, x, x, x, torch.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ValueError):
        L.content_consistency_loss(x, x, x, x, torch.zeros(1, 1, 2, 3))


def test_organ_pixels_count_twice():
    x = torch.zeros(1, 1, 1, 2)
    rec = torch.tensor([[[[1.0, 1.0]]]])
    m = torch.tensor([[[[1.0, 0.0]]]])
    assert float(L.content_consistency_loss(x, rec, x, x, m)) == pytest.approx(1.5)


def test_total_objective_refuses_nonfinite_terms():
    with pytest.raises(FloatingPointError, match="content"):
        L.total_objective(torch.tensor(1.0), torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(1.0))


def test_breakdown_row_has_every_term():
    row = L.total_objective(1.0, 2.0, 3.0, 4.0, 10.0, 1.0).as_row()
    assert row["total"] == 1 + 2 + 30 + 4
    assert set(row) >= {"gan_forward", "gan_backward", "content", "task", "lambda_content", "lambda_task"}
