"""Pooling mechanisms against independent loop-based reference evaluations."""

import numpy as np
import pytest

from weakseg import autodiff as ad
from weakseg.pooling import (
    PoolingConfig,
    gap_scores,
    gmp_scores,
    gwp_scores,
    image_text_scores,
    mpa_masks,
    size_scores,
    spa_masks,
)


def rand_sims(rng, n=None, l=None, scale=2.0):
    n = n or int(rng.integers(1, 65))
    l = l or int(rng.integers(1, 9))
    return rng.normal(scale=scale, size=(n, l))


# -- loop oracles, written independently of the library implementations ------


def gap_oracle(s):
    n, l = s.shape
    out = np.zeros(l)
    for j in range(l):
        for i in range(n):
            out[j] += s[i, j]
        out[j] /= n
    return out


def gmp_oracle(s):
    n, l = s.shape
    out = np.full(l, -np.inf)
    for j in range(l):
        for i in range(n):
            out[j] = max(out[j], s[i, j])
    return out


def spa_oracle(s, s_bg):
    n, l = s.shape
    out = np.zeros((n, l + 1))
    for i in range(n):
        denom = np.exp(s_bg) + sum(np.exp(s[i, j]) for j in range(l))
        out[i, 0] = np.exp(s_bg) / denom
        for j in range(l):
            out[i, j + 1] = np.exp(s[i, j]) / denom
    return out


def mpa_oracle(s, s_bg):
    n, l = s.shape
    out = np.zeros((n, l))
    for i in range(n):
        for j in range(l):
            out[i, j] = np.exp(s[i, j]) / (np.exp(s_bg) + np.exp(s[i, j]))
    return out


def gwp_oracle(s, m, eps):
    n, l = s.shape
    out = np.zeros(l)
    for j in range(l):
        col_sum = sum(m[i, j] for i in range(n)) + eps
        for i in range(n):
            out[j] += (m[i, j] / col_sum) * s[i, j]
    return out


def size_oracle(m, lam, p):
    n, l = m.shape
    out = np.zeros(l)
    for j in range(l):
        mbar = sum(m[i, j] for i in range(n)) / n
        out[j] = (1.0 - mbar) ** p * np.log(lam + mbar)
    return out


class TestAveragePooling:
    def test_constant_matrix(self):
        z = gap_scores(ad.Tensor(np.full((5, 3), 0.7))).z
        np.testing.assert_allclose(z.data, 0.7, atol=1e-15)

    def test_antisymmetric_column(self):
        z = gap_scores(ad.Tensor([[1.0], [-1.0]])).z
        np.testing.assert_allclose(z.data, [0.0], atol=0)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=(16, 4))
        np.testing.assert_allclose(gap_scores(ad.Tensor(s)).z.data, gap_oracle(s),
                                   atol=1e-12)

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            gap_scores(ad.Tensor(np.zeros((0, 3))))


class TestMaxPooling:
    def test_picks_the_maximum(self):
        z = gmp_scores(ad.Tensor([[1.0], [-1.0]])).z
        np.testing.assert_allclose(z.data, [1.0], atol=0)

    def test_constant_matrix(self):
        z = gmp_scores(ad.Tensor(np.full((4, 2), -0.3))).z
        np.testing.assert_allclose(z.data, -0.3, atol=0)

    def test_against_loop_oracle_exact(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=(16, 4))
        assert np.array_equal(gmp_scores(ad.Tensor(s)).z.data, gmp_oracle(s))


class TestSingleLabelMasks:
    def test_single_expression_at_zero(self):
        m = spa_masks(ad.Tensor([[0.0]]), s_bg=0.0)
        np.testing.assert_allclose(m.data, [[0.5, 0.5]], atol=1e-15)

    def test_two_expressions_symmetry(self):
        m = spa_masks(ad.Tensor([[0.0, 0.0]]), s_bg=0.0)
        np.testing.assert_allclose(m.data, 1.0 / 3.0, atol=1e-15)

    def test_rows_sum_to_one_and_match_oracle(self):
        rng = np.random.default_rng(2)
        s = rng.normal(scale=2, size=(8, 3))
        m = spa_masks(ad.Tensor(s), s_bg=0.0).data
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(m, spa_oracle(s, 0.0), atol=1e-12)


class TestMultiLabelMasks:
    def test_at_background_logit(self):
        m = mpa_masks(ad.Tensor([[0.0]]), s_bg=0.0)
        np.testing.assert_allclose(m.data, 0.5, atol=0)

    def test_ten_above_background(self):
        m = mpa_masks(ad.Tensor([[10.0]]), s_bg=0.0)
        np.testing.assert_allclose(m.data, 1.0 / (1.0 + np.exp(-10)), atol=1e-12)
        assert abs(m.data[0, 0] - 0.99995) < 1e-4

    def test_single_expression_equals_single_label_column(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=(12, 1))
        via_mpa = mpa_masks(ad.Tensor(s), 0.0).data
        via_spa = spa_masks(ad.Tensor(s), 0.0).data[:, 1:]
        np.testing.assert_allclose(via_mpa, via_spa, atol=1e-12)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(4)
        s = rng.normal(scale=2, size=(9, 5))
        np.testing.assert_allclose(mpa_masks(ad.Tensor(s), 0.0).data,
                                   mpa_oracle(s, 0.0), atol=1e-12)


class TestWeightedPooling:
    def test_unit_masks_reduce_to_average_pooling(self):
        rng = np.random.default_rng(5)
        s = rng.normal(size=(10, 4))
        ones = ad.Tensor(np.ones_like(s))
        # zero epsilon makes the weights exactly 1/N
        z = gwp_scores(ad.Tensor(s), ones, epsilon=0.0).z
        np.testing.assert_allclose(z.data, gap_scores(ad.Tensor(s)).z.data, atol=1e-12)

    def test_constant_column_recovers_the_constant(self):
        rng = np.random.default_rng(6)
        s = np.full((7, 2), 1.3)
        m = rng.uniform(0.2, 1.0, size=(7, 2))
        z = gwp_scores(ad.Tensor(s), ad.Tensor(m), epsilon=0.0).z
        np.testing.assert_allclose(z.data, 1.3, atol=1e-12)

    def test_against_formula_oracle_with_multilabel_masks(self):
        rng = np.random.default_rng(7)
        s = rng.normal(scale=2, size=(8, 3))
        m = mpa_oracle(s, 0.0)
        z = gwp_scores(ad.Tensor(s), ad.Tensor(m), epsilon=1e-5).z
        np.testing.assert_allclose(z.data, gwp_oracle(s, m, 1e-5), atol=1e-12)

    def test_negative_masks_rejected(self):
        with pytest.raises(ValueError):
            gwp_scores(ad.Tensor(np.ones((3, 2))), ad.Tensor(-np.ones((3, 2))), 1e-5)

    def test_mask_shape_must_match(self):
        with pytest.raises(ValueError):
            gwp_scores(ad.Tensor(np.ones((3, 2))), ad.Tensor(np.ones((4, 2))), 1e-5)


class TestSizeScores:
    def test_full_mask_scores_zero(self):
        z = size_scores(ad.Tensor(np.ones((6, 2))), lam=0.01, p=5.0).z
        np.testing.assert_allclose(z.data, 0.0, atol=0)

    def test_empty_mask_hits_the_floor(self):
        z = size_scores(ad.Tensor(np.zeros((6, 1))), lam=0.01, p=5.0).z
        np.testing.assert_allclose(z.data, np.log(0.01), atol=1e-12)
        assert abs(z.data[0] - (-4.6052)) < 1e-4

    def test_half_mask_without_focal_term(self):
        z = size_scores(ad.Tensor(np.full((4, 1), 0.5)), lam=0.01, p=0.0).z
        np.testing.assert_allclose(z.data, np.log(0.51), atol=1e-12)
        assert abs(z.data[0] - (-0.6733)) < 1e-4

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(8)
        m = rng.uniform(size=(10, 4))
        z = size_scores(ad.Tensor(m), lam=0.01, p=5.0).z
        np.testing.assert_allclose(z.data, size_oracle(m, 0.01, 5.0), atol=1e-12)

    def test_monotone_increasing_in_mean_mask(self):
        # dense grid over [0, 1 - lam] for p >= 1
        lam, p = 0.1, 2.0
        grid = np.linspace(0.0, 1.0 - lam, 400)
        vals = (1.0 - grid) ** p * np.log(lam + grid)
        assert np.all(np.diff(vals) > 0)

    def test_lam_must_be_positive(self):
        with pytest.raises(ValueError):
            size_scores(ad.Tensor(np.ones((2, 2))), lam=0.0, p=1.0)

    def test_mask_range_validated(self):
        with pytest.raises(ValueError):
            size_scores(ad.Tensor(np.full((2, 2), 1.5)), lam=0.1, p=1.0)


class TestScoreDispatch:
    def test_multilabel_constant_at_background(self):
        # every entry at the background logit: masks 0.5, weighted score s_bg
        n, s_bg = 10, 0.0
        s = np.full((n, 2), s_bg)
        cfg = PoolingConfig(mechanism="mpa", lam=0.01, p=5.0)
        sv, masks = image_text_scores(ad.Tensor(s), cfg)
        np.testing.assert_allclose(masks.data, 0.5, atol=0)
        np.testing.assert_allclose(sv.gwp.data, s_bg, atol=1e-12)
        expected_size = (0.5 ** 5) * np.log(0.01 + 0.5)
        np.testing.assert_allclose(sv.size.data, expected_size, atol=1e-12)
        np.testing.assert_allclose(sv.z.data, sv.gwp.data + sv.size.data, atol=1e-12)

    def test_single_expression_spa_equals_mpa(self):
        rng = np.random.default_rng(9)
        s = rng.normal(size=(16, 1))
        sv_spa, m_spa = image_text_scores(ad.Tensor(s), PoolingConfig(mechanism="spa"))
        sv_mpa, m_mpa = image_text_scores(ad.Tensor(s), PoolingConfig(mechanism="mpa"))
        np.testing.assert_allclose(m_spa.data[:, 1:], m_mpa.data, atol=1e-12)
        np.testing.assert_allclose(sv_spa.z.data, sv_mpa.z.data, atol=1e-12)

    def test_multilabel_matches_per_column_oracle(self):
        """Scoring columns one at a time must agree (column independence)."""
        rng = np.random.default_rng(10)
        s = rng.normal(scale=2, size=(12, 4))
        cfg = PoolingConfig(mechanism="mpa")
        sv, _ = image_text_scores(ad.Tensor(s), cfg)
        for j in range(4):
            sv_j, _ = image_text_scores(ad.Tensor(s[:, j:j + 1]), cfg)
            np.testing.assert_allclose(sv.z.data[j], sv_j.z.data[0], atol=0)

    def test_plain_pooling_returns_no_masks(self):
        s = ad.Tensor(np.random.default_rng(11).normal(size=(8, 3)))
        for mech in ("gap", "gmp"):
            sv, masks = image_text_scores(s, PoolingConfig(mechanism=mech))
            assert masks is None
            assert sv.gwp is None and sv.size is None

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PoolingConfig(mechanism="avg")
        with pytest.raises(ValueError):
            PoolingConfig(lam=0.0)
        with pytest.raises(ValueError):
            PoolingConfig(lam=1.5)
        with pytest.raises(ValueError):
            PoolingConfig(epsilon=0.0)


class TestStructuralInvariants:
    def test_multilabel_column_deletion_is_bit_exact(self):
        rng = np.random.default_rng(12)
        s = rng.normal(scale=2, size=(10, 5))
        cfg = PoolingConfig(mechanism="mpa")
        sv_all, m_all = image_text_scores(ad.Tensor(s), cfg)
        keep = [0, 1, 3, 4]  # drop column 2
        sv_sub, m_sub = image_text_scores(ad.Tensor(s[:, keep]), cfg)
        assert np.array_equal(m_all.data[:, keep], m_sub.data)
        assert np.array_equal(sv_all.z.data[keep], sv_sub.z.data)

    def test_single_label_violates_column_deletion(self):
        rng = np.random.default_rng(13)
        s = rng.normal(scale=2, size=(10, 5))
        m_all = spa_masks(ad.Tensor(s), 0.0).data
        m_sub = spa_masks(ad.Tensor(s[:, [0, 1, 3, 4]]), 0.0).data
        assert not np.allclose(m_all[:, [1, 2, 4, 5]], m_sub[:, 1:])

    def test_weighted_score_bounded_by_column_extremes(self):
        rng = np.random.default_rng(14)
        s = rng.uniform(0.1, 3.0, size=(12, 4))  # all positive
        m = rng.uniform(0.0, 1.0, size=(12, 4))
        z = gwp_scores(ad.Tensor(s), ad.Tensor(m), epsilon=1e-5).z.data
        wsum = m.sum(axis=0) / (m.sum(axis=0) + 1e-5)
        assert np.all(z <= s.max(axis=0) * wsum + 1e-12)
        assert np.all(z >= s.min(axis=0) * wsum - 1e-12)

    def test_multilabel_masks_can_overlap_but_single_label_cannot(self):
        # two columns both strongly above background on the same patch
        s = np.array([[4.0, 4.0], [-4.0, -4.0], [-4.0, -4.0]])
        m_multi = mpa_masks(ad.Tensor(s), 0.0).data
        assert m_multi[0, 0] > 0.9 and m_multi[0, 1] > 0.9
        m_single = spa_masks(ad.Tensor(s), 0.0).data
        pairwise = m_single[:, 1] + m_single[:, 2]
        assert np.all(pairwise <= 1.0 + 1e-12)

    def test_score_pipeline_gradcheck_wrt_similarities(self):
        rng = np.random.default_rng(15)
        for mech in ("spa", "mpa"):
            cfg = PoolingConfig(mechanism=mech)
            mix = rng.normal(size=3)

            def fn(s):
                sv, _ = image_text_scores(s, cfg)
                return (sv.z * ad.Tensor(mix)).sum()

            err = ad.gradcheck(fn, [ad.Tensor(rng.normal(size=(8, 3)))], step=1e-5)
            assert err < 1e-5
