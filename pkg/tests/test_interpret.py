import copy

import numpy as np
import pytest
from conftest import randomize_biases, toy_config
from hypothesis import given, settings
from hypothesis import strategies as st

from svdclip.clip_core import encode_images, init_model
from svdclip.encoder import encoder_forward
from svdclip.errors import ConfigError, DegenerateError, InputError, ShapeError
from svdclip.interpret import (
    CorpusFeatures,
    HeadOutputs,
    _head_contribution,
    collect_head_outputs,
    embed_corpus,
    load_corpus,
    project_corpus,
    rank_heads,
    residual_decomposition,
    span_alignment,
    textspan,
    textspan_select,
    tokenize_description,
)
from svdclip.linalg import make_rng


@pytest.fixture
def model():
    m = init_model(toy_config(layers=2, init_std=0.3), 21)
    randomize_biases(m, 22)
    return m.decomposed()


def probes(n=5, seed=0):
    return make_rng(seed).standard_normal((n, 3, 6))


class TestDecomposition:
    def test_completeness_residual(self, model):
        parts, trace = residual_decomposition(model, probes())
        total = sum(parts.values())
        assert np.max(np.abs(total - trace.residual[:, 0, :])) <= 1e-8

    def test_completeness_joint(self, model):
        x = probes()
        emb, cache = encode_images(model, x)
        parts, trace = residual_decomposition(model, x)
        _, inv_std = trace.final_ln
        g, b = model.vision.lnf_gain, model.vision.lnf_bias
        total = b @ model.proj_v
        for key, part in parts.items():
            if key[0] == "head":
                total = total + collect_head_outputs(model, x, key[1], key[2]).outputs
            else:
                centred = part - part.mean(axis=1, keepdims=True)
                total = total + (centred * inv_std * g) @ model.proj_v
        unnormalised = cache["pooled"] @ model.proj_v
        assert np.max(np.abs(total - unnormalised)) <= 1e-8

    def test_single_token(self, model):
        enc = model.vision
        token = make_rng(1).standard_normal((1, 8))
        _, trace = encoder_forward(enc, token)
        cache = trace.attn_caches[0]
        assert np.all(cache["attn"] == 1.0)
        v0 = cache["v"][0, 1, 0]
        expected = v0 @ enc.layers[0].o.effective_weight()[4:8]
        np.testing.assert_allclose(_head_contribution(enc, trace, 0, 1)[0], expected, atol=1e-15)

    def test_zero_v(self, model):
        model.vision.layers[1].v[0].s_current[:] = 0
        model.vision.layers[1].v[0].bias[:] = 0
        out = collect_head_outputs(model, probes(), 1, 0)
        assert np.all(out.outputs == 0)
        assert out.outputs.shape == (5, 8)

    def test_out_of_range(self, model):
        with pytest.raises(InputError):
            collect_head_outputs(model, probes(), 2, 0)
        with pytest.raises(InputError):
            collect_head_outputs(model, probes(), 0, 2)

    def test_residual_space(self, model):
        out = collect_head_outputs(model, probes(), 0, 0, space="residual")
        assert out.outputs.shape == (5, 8)
        with pytest.raises(ConfigError):
            collect_head_outputs(model, probes(), 0, 0, space="other")


def _head(x):
    return HeadOutputs(0, 0, np.asarray(x, float))


def _corpus(t):
    t = np.asarray(t, float)
    return CorpusFeatures([str(i) for i in range(len(t))], t)


class TestProjection:
    def test_fixed_point(self, rng):
        x = rng.standard_normal((3, 6))
        inside = np.array([2.0, -1.0, 0.5]) @ x
        proj, _ = project_corpus(_head(x), _corpus([inside]))
        np.testing.assert_allclose(proj[0], inside, atol=1e-9)

    def test_orthogonal(self, rng):
        x = rng.standard_normal((3, 6))
        q, _ = np.linalg.qr(np.hstack([x.T, rng.standard_normal((6, 1))]))
        proj, _ = project_corpus(_head(x), _corpus([q[:, 3]]))
        assert np.max(np.abs(proj)) <= 1e-9

    def test_idempotent_self_adjoint(self, rng):
        x = rng.standard_normal((4, 7))
        t = rng.standard_normal((10, 7))
        proj, sim = project_corpus(_head(x), _corpus(t))
        again, _ = project_corpus(_head(x), _corpus(proj))
        assert np.max(np.abs(again - proj)) <= 1e-10
        a, b = rng.standard_normal(7), rng.standard_normal(7)
        pa = project_corpus(_head(x), _corpus([a]))[0][0]
        pb = project_corpus(_head(x), _corpus([b]))[0][0]
        assert abs(pa @ b - a @ pb) <= 1e-9
        np.testing.assert_allclose(sim, x @ proj.T, atol=1e-14)

    def test_rank_deficient(self, rng):
        x = np.outer(rng.standard_normal(5), rng.standard_normal(4))
        proj, _ = project_corpus(_head(x), _corpus(rng.standard_normal((3, 4))))
        assert np.linalg.matrix_rank(proj, tol=1e-9) == 1

    def test_zero_outputs(self):
        with pytest.raises(DegenerateError):
            project_corpus(_head(np.zeros((3, 4))), _corpus(np.ones((2, 4))))

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            project_corpus(_head(rng.standard_normal((3, 4))), _corpus(np.ones((2, 5))))


def greedy_oracle(x, texts, m):
    """Vector-space greedy selection: exhaustive scoring each round, explicit deflation."""
    xc = x - x.mean(axis=0)
    t = texts.copy()
    picked, first = [], None
    for _ in range(m):
        best, best_score = None, -1.0
        for i in range(len(t)):
            if i in picked or np.linalg.norm(t[i]) < 1e-12:
                continue
            u = t[i] / np.linalg.norm(t[i])
            score = float(np.sum((xc @ u) ** 2))
            if score > best_score:
                best, best_score = i, score
        if first is None:
            first = best_score
        if best is None or best_score <= 1e-12 * first:
            break
        picked.append(best)
        u = t[best] / np.linalg.norm(t[best])
        xc = xc - np.outer(xc @ u, u)
        t = t - np.outer(t @ u, u)
    return picked


class TestTextSpan:
    def test_orthogonal_candidate_loses(self, rng):
        x = rng.standard_normal((6, 5))
        x[:, 4] = 0
        xc = x - x.mean(axis=0)
        pc1 = np.linalg.svd(xc)[2][0]
        t = np.array([np.eye(5)[4], pc1 * 0.3])
        proj, sim = project_corpus(_head(x), _corpus(t))
        assert textspan_select(sim, proj, 1).indices == [1]

    def test_rank_one(self, rng):
        a = rng.standard_normal(6)
        d = rng.standard_normal(4)
        x = np.outer(a, d)
        other = rng.standard_normal(4)
        other -= d * (other @ d) / (d @ d)
        result, ratios = textspan(_head(x), _corpus([other, d]), 1)
        assert result.indices == [1]
        assert ratios[0] == pytest.approx(1.0, abs=1e-9)

    def test_zero_m(self, rng):
        x = rng.standard_normal((4, 3))
        proj, sim = project_corpus(_head(x), _corpus(rng.standard_normal((3, 3))))
        assert textspan_select(sim, proj, 0).indices == []

    def test_too_many(self, rng):
        with pytest.raises(ConfigError):
            textspan_select(np.zeros((2, 2)), np.zeros((2, 3)), 3)

    def test_early_stop(self, rng):
        x = np.outer(rng.standard_normal(5), rng.standard_normal(4))
        proj, sim = project_corpus(_head(x), _corpus(rng.standard_normal((3, 4))))
        res = textspan_select(sim, proj, 3)
        assert res.early_stop and len(res.indices) == 1

    def test_full_permutation(self, rng):
        x = rng.standard_normal((10, 5))
        proj, sim = project_corpus(_head(x), _corpus(rng.standard_normal((5, 5))))
        assert sorted(textspan_select(sim, proj, 5).indices) == list(range(5))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n_texts=st.integers(1, 6), m=st.integers(1, 4),
       extra_rows=st.integers(1, 4), extra_width=st.integers(1, 2))
def test_textspan_matches_oracle(seed, n_texts, m, extra_rows, extra_width):
    # generic instances only: the space left after m - 1 deflations stays at
    # least 2-D, so no two candidates tie exactly
    rng = make_rng(seed)
    m = min(m, n_texts)
    width = m + extra_width
    rows = width + extra_rows
    x = rng.standard_normal((rows, width))
    t = rng.standard_normal((n_texts, width))
    proj, sim = project_corpus(_head(x), _corpus(t))
    got = textspan_select(sim, proj, m).indices
    expected = greedy_oracle(x, proj, m)
    assert got == expected


class TestRankHeads:
    def test_no_change(self, model):
        reports = rank_heads(None, model, copy.deepcopy(model), layers=range(2))
        assert [r.score for r in reports] == [0.0] * 4
        assert [(r.layer, r.head) for r in reports] == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_double_one_head(self, model):
        after = copy.deepcopy(model)
        after.vision.layers[0].v[1].s_current *= 2
        reports = rank_heads(None, model, after, layers=range(2))
        assert (reports[0].layer, reports[0].head) == (0, 1)
        assert reports[0].score == pytest.approx(1.0, abs=1e-12)
        assert reports[0].label == "L0.H1"
        assert all(r.score == 0.0 for r in reports[1:])

    def test_default_layers(self):
        m = init_model(toy_config(layers=6), 0).decomposed()
        reports = rank_heads(None, m, m)
        assert sorted({r.layer for r in reports}) == [2, 3, 4, 5]

    def test_architecture_mismatch(self, model):
        other = init_model(toy_config(layers=1), 0).decomposed()
        with pytest.raises(ConfigError):
            rank_heads(None, model, other)

    def test_visit_order_invariant(self, model):
        after = copy.deepcopy(model)
        rng = make_rng(3)
        for _, lin in after.vision.named_linears():
            lin.s_current *= 1 + 0.05 * rng.standard_normal(lin.rank)
        a = rank_heads(None, model, after, layers=[0, 1])
        b = rank_heads(None, model, after, layers=[1, 0])
        assert [(r.layer, r.head, r.score) for r in a] == [(r.layer, r.head, r.score) for r in b]


class TestSpanAlignment:
    def test_identical(self, rng):
        w = rng.standard_normal((6, 3))
        np.testing.assert_allclose(span_alignment(w, w), np.ones(3), atol=1e-12)

    def test_rescaled(self, rng):
        w = rng.standard_normal((6, 3))
        u, s, vt = np.linalg.svd(w, full_matrices=False)
        w2 = u @ np.diag(s * [3.0, -0.2, 0.7]) @ vt
        assert span_alignment(w, w2).min() >= 1 - 1e-9

    def test_rotated_out(self, rng):
        w = rng.standard_normal((8, 3))
        u, s, vt = np.linalg.svd(w, full_matrices=True)
        comp = u[:, 3:]
        rot, _ = np.linalg.qr(rng.standard_normal((5, 3)))
        w2 = (comp @ rot) @ np.diag(s) @ vt
        assert span_alignment(w, w2).min() < 0.5

    def test_row_side(self, rng):
        w = rng.standard_normal((3, 6))
        assert span_alignment(w, 2 * w, side="row").min() >= 1 - 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            span_alignment(np.ones((3, 2)), np.ones((2, 3)))


class TestCorpus:
    def test_tokenize(self):
        assert tokenize_description("3 4 5", 10, 8).tolist() == [3, 4, 5]
        a = tokenize_description("Red Stripes", 64, 8)
        assert a.tolist() == tokenize_description("red stripes", 64, 8).tolist()
        assert len(tokenize_description("a b c d e f g h i j", 64, 4)) == 4
        with pytest.raises(InputError):
            tokenize_description("99", 10, 4)
        with pytest.raises(InputError):
            tokenize_description("   ", 10, 4)

    def test_load_and_embed(self, tmp_path, model):
        p = tmp_path / "c.txt"
        p.write_text("1 2\n\nstriped pattern\n7\n", encoding="utf-8")
        texts = load_corpus(p)
        assert texts == ["1 2", "striped pattern", "7"]
        feats = embed_corpus(model, texts)
        assert feats.embeddings.shape == (3, 8)
        np.testing.assert_allclose(np.linalg.norm(feats.embeddings, axis=1), 1, atol=1e-10)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path / "nope.txt")
