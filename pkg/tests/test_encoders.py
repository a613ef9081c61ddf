"""Encoder towers and the scaled-cosine similarity matrix."""

import numpy as np
import pytest

from weakseg import autodiff as ad
from weakseg.encoders import (
    EncoderConfig,
    GroundingModel,
    ProjectionParams,
    encode_image,
    encode_text,
    encode_texts,
    patchify,
    similarity_matrix,
)
from weakseg.synthbench import Vocabulary


def toy_model(seed=0, **overrides):
    cfg = EncoderConfig(**overrides)
    vocab = Vocabulary()
    return GroundingModel.create(cfg, len(vocab), vocab.bos_id, vocab.eos_id,
                                 seed=seed), vocab


class TestPatchify:
    def test_row_major_patch_order(self):
        image = np.arange(4 * 4 * 1, dtype=float).reshape(4, 4, 1)
        raw = patchify(image, 2)
        assert raw.shape == (4, 4)
        np.testing.assert_array_equal(raw[0], [0, 1, 4, 5])     # top-left
        np.testing.assert_array_equal(raw[1], [2, 3, 6, 7])     # top-right
        np.testing.assert_array_equal(raw[2], [8, 9, 12, 13])   # bottom-left

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((30, 32, 3)), 8)


class TestImageEncoder:
    def test_identical_patches_and_zero_positions_give_equal_rows(self):
        model, _ = toy_model(image_size=32)
        model.image.pos.data[:] = 0.0
        tokens = model.encode_image(np.zeros((32, 32, 3))).data
        np.testing.assert_allclose(tokens, tokens[0], atol=1e-12)

    def test_patch_count_for_32px_image(self):
        model, _ = toy_model(image_size=32)
        tokens = model.encode_image(np.random.default_rng(0).uniform(size=(32, 32, 3)))
        assert tokens.data.shape == (16, 64)

    def test_permutation_equivariance(self):
        """Swapping two patches and their position rows swaps the output rows."""
        rng = np.random.default_rng(1)
        model, _ = toy_model(image_size=32)
        image = rng.uniform(size=(32, 32, 3))
        swapped = image.copy()
        # patches 0 and 5 live at grid (0,0) and (1,1) for P=8, 4x4 grid
        swapped[0:8, 0:8], swapped[8:16, 8:16] = (
            image[8:16, 8:16].copy(), image[0:8, 0:8].copy())
        out1 = model.encode_image(image).data
        model.image.pos.data[[0, 5]] = model.image.pos.data[[5, 0]]
        out2 = model.encode_image(swapped).data
        np.testing.assert_allclose(out2[0], out1[5], atol=1e-10)
        np.testing.assert_allclose(out2[5], out1[0], atol=1e-10)
        rest = [i for i in range(16) if i not in (0, 5)]
        np.testing.assert_allclose(out2[rest], out1[rest], atol=1e-10)

    def test_indivisible_image_rejected(self):
        model, _ = toy_model()
        with pytest.raises(ValueError):
            model.encode_image(np.zeros((60, 64, 3)))

    def test_pure_function_of_the_pixels(self):
        rng = np.random.default_rng(2)
        model, _ = toy_model()
        image = rng.uniform(size=(64, 64, 3))
        first = model.encode_image(image).data.copy()
        model.encode_image(rng.uniform(size=(64, 64, 3)))  # unrelated call
        again = model.encode_image(image.copy()).data
        np.testing.assert_array_equal(first, again)

    def test_batched_encoding_matches_single(self):
        rng = np.random.default_rng(3)
        model, _ = toy_model()
        images = rng.uniform(size=(3, 64, 64, 3))
        batched = model.encode_images(images).data
        for b in range(3):
            single = model.encode_image(images[b]).data
            np.testing.assert_allclose(batched[b], single, atol=1e-12)


class TestTextEncoder:
    def test_single_token_is_finite_and_deterministic(self):
        model, vocab = toy_model()
        ids = vocab.encode(("red",))
        a = encode_text(ids, model.text).data
        b = encode_text(ids, model.text).data
        assert np.all(np.isfinite(a))
        np.testing.assert_array_equal(a, b)

    def test_word_order_matters(self):
        model, vocab = toy_model()
        ab = encode_text(vocab.encode(("red", "square")), model.text).data
        ba = encode_text(vocab.encode(("square", "red")), model.text).data
        assert not np.allclose(ab, ba)

    def test_unused_vocabulary_rows_do_not_leak(self):
        model_a, vocab = toy_model(seed=7)
        model_b, _ = toy_model(seed=7)
        ids = vocab.encode(("blue", "circle"))
        used = set(ids) | {vocab.bos_id, vocab.eos_id}
        unused = [i for i in range(len(vocab)) if i not in used]
        model_b.text.vocab.data[unused] = 123.456
        out_a = encode_text(ids, model_a.text).data
        out_b = encode_text(ids, model_b.text).data
        np.testing.assert_array_equal(out_a, out_b)

    def test_empty_sequence_rejected(self):
        model, _ = toy_model()
        with pytest.raises(ValueError):
            encode_text([], model.text)

    def test_unknown_token_id_rejected(self):
        model, vocab = toy_model()
        with pytest.raises(ValueError):
            encode_text([len(vocab) + 3], model.text)

    def test_grouped_batch_encoding_matches_single(self):
        model, vocab = toy_model()
        exprs = [("red", "square"), ("large", "blue", "circle"), ("thing",),
                 ("green", "thing"), ("small", "red", "triangle")]
        ids = [vocab.encode(e) for e in exprs]
        batched = encode_texts(ids, model.text).data
        for j, seq in enumerate(ids):
            single = encode_text(seq, model.text).data
            np.testing.assert_allclose(batched[j], single, atol=1e-12)


class TestSimilarityMatrix:
    def make_proj(self, dim, temperature=1.0):
        return ProjectionParams(
            image_proj=ad.Tensor(np.eye(dim)),
            text_proj=ad.Tensor(np.eye(dim)),
            log_temperature=ad.Tensor(np.log(temperature), requires_grad=True),
        )

    def test_identical_unit_vectors(self):
        v = np.array([[3.0, 4.0]])  # normalization makes magnitude irrelevant
        s = similarity_matrix(ad.Tensor(v), ad.Tensor(v), self.make_proj(2))
        np.testing.assert_allclose(s.data, [[1.0]], atol=1e-12)

    def test_opposite_vectors(self):
        v = np.array([[1.0, 2.0]])
        s = similarity_matrix(ad.Tensor(v), ad.Tensor(-v), self.make_proj(2))
        np.testing.assert_allclose(s.data, [[-1.0]], atol=1e-12)

    def test_against_per_entry_oracle(self):
        rng = np.random.default_rng(4)
        dim, tau = 6, 0.5
        x = rng.normal(size=(4, dim))
        y = rng.normal(size=(3, dim))
        wi = rng.normal(size=(dim, dim))
        wt = rng.normal(size=(dim, dim))
        proj = ProjectionParams(ad.Tensor(wi), ad.Tensor(wt),
                                ad.Tensor(np.log(tau)))
        got = similarity_matrix(ad.Tensor(x), ad.Tensor(y), proj).data
        xp, yp = x @ wi, y @ wt
        expected = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                xi = xp[i] / np.linalg.norm(xp[i])
                yj = yp[j] / np.linalg.norm(yp[j])
                expected[i, j] = float(xi @ yj) / tau
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_unscaled_cosines_bounded(self):
        rng = np.random.default_rng(5)
        model, vocab = toy_model()
        x = model.encode_image(rng.uniform(size=(64, 64, 3)))
        y = model.encode_expressions([vocab.encode(("red", "square")),
                                      vocab.encode(("blue", "thing"))])
        s = model.similarity(x, y)
        tau = model.proj.temperature
        assert np.all(np.abs(tau * s.data) <= 1.0 + 1e-9)

    def test_zero_vector_after_projection_rejected(self):
        proj = ProjectionParams(ad.Tensor(np.zeros((2, 2))), ad.Tensor(np.eye(2)),
                                ad.Tensor(0.0))
        with pytest.raises(ValueError):
            similarity_matrix(ad.Tensor(np.ones((1, 2))), ad.Tensor(np.ones((1, 2))), proj)

    def test_temperature_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        dim = 5
        x = rng.normal(size=(4, dim))
        y = rng.normal(size=(3, dim))
        wi = rng.normal(size=(dim, dim))
        wt = rng.normal(size=(dim, dim))

        def fn(log_t):
            proj = ProjectionParams(ad.Tensor(wi), ad.Tensor(wt), log_t)
            s = similarity_matrix(ad.Tensor(x), ad.Tensor(y), proj)
            return (s * s).sum()

        err = ad.gradcheck(fn, [ad.Tensor(np.log(0.07))], step=1e-5)
        assert err < 1e-5

    def test_full_pipeline_gradcheck_from_tokens_to_similarities(self):
        rng = np.random.default_rng(7)
        dim = 4

        def fn(x, y, wi, wt, log_t):
            proj = ProjectionParams(wi, wt, log_t)
            s = similarity_matrix(x, y, proj)
            return (s ** 2).sum()

        point = [
            ad.Tensor(rng.normal(size=(3, dim))),
            ad.Tensor(rng.normal(size=(2, dim))),
            ad.Tensor(rng.normal(size=(dim, dim))),
            ad.Tensor(rng.normal(size=(dim, dim))),
            ad.Tensor(np.log(0.3)),
        ]
        assert ad.gradcheck(fn, point, step=1e-5) < 1e-5


class TestParameterContainers:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            toy_model(dim_image=30, heads=4)

    def test_bos_eos_must_differ(self):
        cfg = EncoderConfig()
        with pytest.raises(ValueError):
            GroundingModel.create(cfg, 10, 3, 3, seed=0)

    def test_named_parameters_are_stable_and_complete(self):
        model, _ = toy_model()
        names = list(model.named_parameters())
        assert names == list(model.named_parameters())
        assert "image.patch_w" in names and "proj.log_temperature" in names
        assert any(n.startswith("text.block1.") for n in names)

    def test_load_state_round_trip(self):
        model_a, _ = toy_model(seed=1)
        model_b, _ = toy_model(seed=2)
        state = {n: t.data.copy() for n, t in model_a.named_parameters().items()}
        model_b.load_state(state)
        for name, t in model_b.named_parameters().items():
            np.testing.assert_array_equal(t.data, state[name])

    def test_load_state_shape_mismatch(self):
        model, _ = toy_model()
        state = {n: t.data for n, t in model.named_parameters().items()}
        state["image.patch_w"] = np.zeros((3, 3))
        with pytest.raises(ValueError):
            model.load_state(state)
