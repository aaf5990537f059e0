import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svdclip.clip_core import ModelConfig
from svdclip.encoder import EncoderConfig
from svdclip.errors import ConfigError, ShapeError
from svdclip.linalg import make_rng
from svdclip.svd_param import (
    RankMaskSpec,
    count_trainable,
    decompose_layer,
    effective_weight,
    forward,
    grad_singular,
)

CLIP_B16 = ModelConfig(
    EncoderConfig(768, 12, 3072, 12), EncoderConfig(512, 8, 2048, 12),
    embed_dim=512, patch_dim=768, num_patches=196, vocab_size=49408, max_text_len=77,
)
BIOMEDCLIP = ModelConfig(
    EncoderConfig(768, 12, 3072, 12), EncoderConfig(768, 12, 3072, 12),
    embed_dim=512, patch_dim=768, num_patches=196, vocab_size=30522, max_text_len=256,
)


def span_cosines(a, b):
    """Independent principal-cosine oracle via numpy QR + numpy SVD."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    return np.linalg.svd(qa.T @ qb, compute_uv=False)


class TestDecompose:
    def test_diagonal_all(self):
        layer = decompose_layer(np.diag([3.0, 1.0]))
        np.testing.assert_array_equal(layer.s_current, [3.0, 1.0])
        np.testing.assert_array_equal(layer.mask, [True, True])

    @pytest.mark.parametrize(
        "spec, expected",
        [
            (RankMaskSpec("top_k", k=1), [True, False, False, False]),
            (RankMaskSpec("bottom_k", k=2), [False, False, True, True]),
            (RankMaskSpec("top_k", ratio=0.5), [True, True, False, False]),
            (RankMaskSpec("bottom_k", ratio=1.0), [True] * 4),
        ],
    )
    def test_masks(self, rng, spec, expected):
        layer = decompose_layer(rng.standard_normal((4, 6)), mask_spec=spec)
        np.testing.assert_array_equal(layer.mask, expected)

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, rng, k):
        with pytest.raises(ConfigError):
            decompose_layer(rng.standard_normal((4, 4)), mask_spec=RankMaskSpec("top_k", k=k))

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            RankMaskSpec("middle")
        with pytest.raises(ConfigError):
            RankMaskSpec("top_k")
        with pytest.raises(ConfigError):
            RankMaskSpec("top_k", ratio=1.5)


class TestEffectiveWeight:
    def test_untouched(self, rng):
        w = rng.standard_normal((5, 3))
        layer = decompose_layer(w)
        assert np.linalg.norm(effective_weight(layer) - w) / np.linalg.norm(w) <= 1e-10

    def test_scale_two(self, rng):
        w = rng.standard_normal((5, 3))
        layer = decompose_layer(w)
        layer.s_current *= 2
        assert np.linalg.norm(effective_weight(layer) - 2 * w) / np.linalg.norm(2 * w) <= 1e-10

    def test_dense_recompose_oracle(self, rng):
        layer = decompose_layer(rng.standard_normal((4, 6)))
        layer.s_current += rng.standard_normal(4) * 0.3
        u, v, s = layer.factors.u, layer.factors.v, layer.s_current
        oracle = u @ np.diag(s) @ v.T
        np.testing.assert_allclose(effective_weight(layer), oracle, rtol=0, atol=1e-15)


class TestForward:
    def test_identity_input(self, rng):
        layer = decompose_layer(rng.standard_normal((4, 3)))
        np.testing.assert_allclose(forward(layer, np.eye(4)), effective_weight(layer), atol=1e-15)

    def test_zero(self, rng):
        layer = decompose_layer(rng.standard_normal((4, 3)), bias=np.zeros(3))
        np.testing.assert_array_equal(forward(layer, np.zeros((2, 4))), np.zeros((2, 3)))

    def test_dense_path(self, rng):
        layer = decompose_layer(rng.standard_normal((6, 5)), bias=rng.standard_normal(5))
        layer.s_current *= 1.3
        x = rng.standard_normal((7, 6))
        np.testing.assert_allclose(
            forward(layer, x), x @ effective_weight(layer) + layer.bias, rtol=0, atol=1e-11
        )

    def test_shape_mismatch(self, rng):
        layer = decompose_layer(rng.standard_normal((4, 3)))
        with pytest.raises(ShapeError):
            forward(layer, np.ones((2, 3)))


class TestGradSingular:
    def test_orthonormal_pick(self, rng):
        layer = decompose_layer(rng.standard_normal((5, 4)))
        u, v = layer.factors.u, layer.factors.v
        g = grad_singular(layer, np.outer(u[:, 1], v[:, 1]))
        np.testing.assert_allclose(g, [0, 1, 0, 0], atol=1e-14)

    def test_diagonal(self):
        layer = decompose_layer(np.diag([4.0, 3.0, 2.0]))
        g = grad_singular(layer, np.diag([0.5, -1.0, 2.0]))
        np.testing.assert_allclose(g, [0.5, -1.0, 2.0])

    def test_finite_difference(self, rng):
        layer = decompose_layer(rng.standard_normal((4, 3)))
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((5, 3))

        def loss(s):
            w = (layer.factors.u * s) @ layer.factors.v.T
            return 0.5 * np.sum((a @ w - b) ** 2)

        s0 = layer.s_current.copy()
        grad_w = a.T @ (a @ layer.effective_weight() - b)
        g = grad_singular(layer, grad_w)
        h = 1e-5
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd = (loss(s0 + e) - loss(s0 - e)) / (2 * h)
            assert abs(fd - g[j]) / max(abs(fd), abs(g[j])) <= 1e-6

    def test_masked_zero(self, rng):
        layer = decompose_layer(rng.standard_normal((4, 4)), mask_spec=RankMaskSpec("top_k", k=2))
        g = grad_singular(layer, rng.standard_normal((4, 4)))
        assert np.all(g[2:] == 0.0) and np.all(g[:2] != 0.0)

    def test_matches_backward(self, rng):
        layer = decompose_layer(rng.standard_normal((6, 4)))
        x = rng.standard_normal((3, 6))
        dy = rng.standard_normal((3, 4))
        _, grads = layer.backward(x, dy)
        np.testing.assert_allclose(grads["s_current"], grad_singular(layer, x.T @ dy), atol=1e-13)

    def test_shape(self, rng):
        layer = decompose_layer(rng.standard_normal((4, 3)))
        with pytest.raises(ShapeError):
            grad_singular(layer, np.ones((3, 4)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_grad_singular_linear(seed, a, b):
    rng = make_rng(seed)
    layer = decompose_layer(rng.standard_normal((5, 3)))
    g1, g2 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    lhs = grad_singular(layer, a * g1 + b * g2)
    rhs = a * grad_singular(layer, g1) + b * grad_singular(layer, g2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), rows=st.integers(2, 9), cols=st.integers(2, 9))
def test_column_space_preserved(seed, rows, cols):
    rng = make_rng(seed)
    w = rng.standard_normal((rows, cols))
    layer = decompose_layer(w)
    r = layer.rank
    layer.s_current[:] = rng.uniform(0.1, 3.0, r) * rng.choice([-1.0, 1.0], r)
    cos = span_cosines(w, layer.effective_weight())
    assert cos.min() >= 1 - 1e-9


class TestCount:
    def test_clip_b16(self):
        assert count_trainable(CLIP_B16) == 92_160

    def test_biomedclip(self):
        assert count_trainable(BIOMEDCLIP) == 110_592

    def test_full_granularity_same_count(self):
        full = ModelConfig(CLIP_B16.vision, CLIP_B16.text, 512, 768, 196, 49408, 77, qkv_granularity="full")
        assert count_trainable(full) == 92_160

    def test_toy(self):
        assert count_trainable([EncoderConfig(8, 1, 32, 1)]) == 4 * 8 + 8 + 8

    def test_masked(self):
        cfg = [EncoderConfig(8, 2, 32, 1)]
        # q,k,v: 6 head slices of 8x4 -> k=1 each; o, mlp_in, mlp_out -> 1 each
        assert count_trainable(cfg, RankMaskSpec("top_k", k=1)) == 9


@settings(max_examples=50, deadline=None)
@given(
    dv=st.sampled_from([4, 8, 12, 16]), mv=st.integers(1, 40), lv=st.integers(0, 4),
    dt=st.sampled_from([4, 8, 12]), mt=st.integers(1, 40), lt=st.integers(0, 4),
    gran=st.sampled_from(["head", "full"]),
)
def test_count_closed_form(dv, mv, lv, dt, mt, lt, gran):
    cfg = ModelConfig(EncoderConfig(dv, 2, mv, lv), EncoderConfig(dt, 4, mt, lt), 8, 4, 2, 10, 4,
                      qkv_granularity=gran)
    closed = lv * (4 * dv + 2 * min(dv, mv)) + lt * (4 * dt + 2 * min(dt, mt))
    assert count_trainable(cfg) == closed
