"""Classification and Dice losses against direct-formula oracles."""

import numpy as np
import pytest

from weakseg import autodiff as ad
from weakseg.objectives import dice_loss, soft_margin_loss


def soft_margin_oracle(z, labels):
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    total = 0.0
    for zj, yj in zip(z, labels):
        total += -yj * np.log(sig(zj)) - (1.0 - yj) * np.log(sig(-zj))
    return total


class TestSoftMarginLoss:
    def test_uncertain_positive_costs_log_two(self):
        loss = soft_margin_loss(ad.Tensor([0.0]), [1.0])
        np.testing.assert_allclose(loss.item(), np.log(2.0), atol=1e-12)
        assert abs(loss.item() - 0.6931) < 1e-4

    def test_saturated_correct_prediction_is_free(self):
        assert soft_margin_loss(ad.Tensor([20.0]), [1.0]).item() < 1e-8

    def test_against_formula_oracle(self):
        rng = np.random.default_rng(0)
        z = rng.normal(scale=3, size=6)
        labels = rng.uniform(size=6).round()
        loss = soft_margin_loss(ad.Tensor(z), labels)
        np.testing.assert_allclose(loss.item(), soft_margin_oracle(z, labels),
                                   atol=1e-12)

    def test_fractional_labels_allowed(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=4)
        labels = rng.uniform(size=4)
        loss = soft_margin_loss(ad.Tensor(z), labels)
        np.testing.assert_allclose(loss.item(), soft_margin_oracle(z, labels),
                                   atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            soft_margin_loss(ad.Tensor([1.0, 2.0]), [1.0])

    def test_labels_outside_unit_interval_rejected(self):
        with pytest.raises(ValueError):
            soft_margin_loss(ad.Tensor([1.0]), [1.5])

    def test_non_negative_and_matches_logistic_identity(self):
        """For binary labels the loss equals sum log(1 + exp(-(2y-1) z))."""
        rng = np.random.default_rng(2)
        for _ in range(20):
            z = rng.normal(scale=4, size=5)
            labels = rng.uniform(size=5).round()
            loss = soft_margin_loss(ad.Tensor(z), labels).item()
            identity = np.log1p(np.exp(-(2 * labels - 1) * z)).sum()
            assert loss >= 0
            np.testing.assert_allclose(loss, identity, rtol=1e-12)

    def test_batched_input_sums_over_images(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(3, 4))
        labels = rng.uniform(size=(3, 4)).round()
        batched = soft_margin_loss(ad.Tensor(z), labels).item()
        per_image = sum(soft_margin_loss(ad.Tensor(z[b]), labels[b]).item()
                        for b in range(3))
        np.testing.assert_allclose(batched, per_image, atol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        labels = rng.uniform(size=4).round()
        fn = lambda z: soft_margin_loss(z, labels)
        for _ in range(5):
            err = ad.gradcheck(fn, [ad.Tensor(rng.normal(scale=2, size=4))])
            assert err < 1e-6

    def test_matches_finite_differences_on_four_by_four(self):
        rng = np.random.default_rng(5)
        labels = rng.uniform(size=(4, 4)).round()
        fn = lambda z: soft_margin_loss(z, labels)
        err = ad.gradcheck(fn, [ad.Tensor(rng.normal(size=(4, 4)))], step=1e-5)
        assert err < 1e-6


class TestDiceLoss:
    def test_perfect_prediction(self):
        gt = np.zeros((6, 6))
        gt[2:4, 2:4] = 1.0
        loss = dice_loss(ad.Tensor(gt.copy()), gt)
        np.testing.assert_allclose(loss.item(), 0.0, atol=1e-6)

    def test_disjoint_masks(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[0, 0] = 1.0
        b[3, 3] = 1.0
        loss = dice_loss(ad.Tensor(a), b)
        np.testing.assert_allclose(loss.item(), 1.0, atol=1e-6)

    def test_half_confidence_against_full_mask(self):
        pred = np.full((8, 8), 0.5)
        gt = np.ones((8, 8))
        loss = dice_loss(ad.Tensor(pred), gt)
        np.testing.assert_allclose(loss.item(), 1.0 / 3.0, atol=1e-7)

    def test_empty_vs_empty_is_zero_by_convention(self):
        loss = dice_loss(ad.Tensor(np.zeros((3, 3))), np.zeros((3, 3)))
        assert loss.item() == 0.0

    def test_bounded_and_symmetric_for_binary_inputs(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = (rng.uniform(size=(5, 5)) > 0.5).astype(float)
            b = (rng.uniform(size=(5, 5)) > 0.5).astype(float)
            lab = dice_loss(ad.Tensor(a), b).item()
            lba = dice_loss(ad.Tensor(b), a).item()
            assert 0.0 <= lab <= 1.0
            np.testing.assert_allclose(lab, lba, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_loss(ad.Tensor(np.zeros((2, 2))), np.zeros((3, 3)))

    def test_target_must_be_binary(self):
        with pytest.raises(ValueError):
            dice_loss(ad.Tensor(np.zeros((2, 2))), np.full((2, 2), 0.5))

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        gt = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
        fn = lambda m: dice_loss(m, gt)
        for _ in range(5):
            point = [ad.Tensor(rng.uniform(0.05, 0.95, size=(8, 8)))]
            assert ad.gradcheck(fn, point, step=1e-5) < 1e-6
