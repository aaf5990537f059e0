import math

import numpy as np
import oracles
import pytest
from conftest import randomize_biases, toy_config

from svdclip.clip_core import (
    EmbeddingBatch,
    ModelConfig,
    class_probabilities,
    encode_image,
    encode_images,
    encode_text,
    encode_texts,
    init_model,
    predict,
)
from svdclip.errors import ConfigError, InputError, ShapeError


@pytest.fixture
def model():
    m = init_model(toy_config(layers=2, init_std=0.3), 11)
    randomize_biases(m, 12)
    return m.decomposed()


def test_tau_default():
    m = init_model(toy_config(), 0)
    assert m.tau == pytest.approx(0.07, rel=1e-12)


def test_config_roundtrip():
    cfg = toy_config(layers=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncodeImage:
    def test_unit_norm(self, model, rng):
        for scale in (1e-3, 1.0, 1e3):
            e = encode_image(model, rng.standard_normal((3, 6)) * scale)
            assert abs(np.linalg.norm(e) - 1) <= 1e-10

    def test_identical_inputs(self, model, rng):
        x = rng.standard_normal((3, 6))
        assert np.array_equal(encode_image(model, x), encode_image(model, x.copy()))

    def test_oracle(self, model, rng):
        x = rng.standard_normal((3, 6))
        np.testing.assert_allclose(encode_image(model, x), oracles.image_embedding(model, x), rtol=0, atol=1e-10)

    def test_batch(self, model, rng):
        x = rng.standard_normal((4, 3, 6))
        emb, _ = encode_images(model, x)
        for i in range(4):
            np.testing.assert_allclose(emb[i], encode_image(model, x[i]), atol=1e-14)

    def test_shape_error(self, model, rng):
        with pytest.raises(ShapeError):
            encode_image(model, rng.standard_normal((3, 5)))


class TestEncodeText:
    def test_unit_norm(self, model):
        for ids in ([0], [1, 2, 3], [31, 31, 0, 7]):
            assert abs(np.linalg.norm(encode_text(model, ids)) - 1) <= 1e-10

    def test_identical_inputs(self, model):
        assert np.array_equal(encode_text(model, [3, 4]), encode_text(model, [3, 4]))

    def test_oracle(self, model):
        ids = [5, 9, 30]
        np.testing.assert_allclose(encode_text(model, ids), oracles.text_embedding(model, ids), rtol=0, atol=1e-10)

    def test_batch(self, model):
        ids = np.array([[1, 2, 3], [4, 5, 6]])
        emb, _ = encode_texts(model, ids)
        np.testing.assert_allclose(emb[1], encode_text(model, ids[1]), atol=1e-14)

    @pytest.mark.parametrize("ids", [[32], [-1], [0, 1, 2, 3, 4], [1.5]])
    def test_bad_ids(self, model, ids):
        with pytest.raises(InputError):
            encode_text(model, ids)


class TestProbabilities:
    def test_identical_classes_uniform(self):
        e = np.array([0.6, 0.8])
        p = class_probabilities(e, EmbeddingBatch(np.tile(e, (5, 1)), "T"), 0.07)
        np.testing.assert_allclose(p, np.full(5, 0.2), atol=1e-15)

    def test_analytic(self):
        p = class_probabilities(np.array([1.0, 0.0]), np.eye(2), 1.0)
        np.testing.assert_allclose(p, [math.e / (1 + math.e), 1 / (1 + math.e)], atol=1e-15)
        assert p[0] == pytest.approx(0.731059, abs=1e-6)

    def test_sharp(self):
        img = np.array([1.0, 0.0])
        classes = np.array([[1.0, 0.0], [0.9, math.sqrt(1 - 0.81)]])
        p = class_probabilities(img, classes, 0.01)
        assert p[0] == pytest.approx(1 / (1 + math.exp(-10)), abs=1e-12)
        assert p[0] == pytest.approx(0.9999546, abs=1e-7)

    def test_sums_to_one(self, rng):
        img = rng.standard_normal((6, 4))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        cls = rng.standard_normal((5, 4))
        cls /= np.linalg.norm(cls, axis=1, keepdims=True)
        p = class_probabilities(img, cls, 0.05)
        assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12
        assert np.all((p > 0) & (p < 1))

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, tau):
        with pytest.raises(ConfigError):
            class_probabilities(np.array([1.0, 0.0]), np.eye(2), tau)

    def test_batch_rejects_non_unit(self):
        with pytest.raises(InputError):
            EmbeddingBatch(np.array([[2.0, 0.0]]), "T")


class TestPredict:
    def test_one_hot(self):
        assert predict(np.array([0.0, 1.0, 0.0]), np.eye(3)) == 1

    def test_tie_lowest_index(self):
        cls = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [1.0, 0.0]])
        assert predict(np.array([1.0, 0.0]), cls) == 1

    def test_tau_invariance(self, rng):
        img = rng.standard_normal((20, 4))
        cls = rng.standard_normal((6, 4))
        base = predict(img, cls, 1.0)
        for tau in (1e-3, 0.07, 10.0):
            assert np.array_equal(predict(img, cls, tau), base)
            assert np.array_equal(np.argmax(class_probabilities(img, cls, tau), axis=1), base)
