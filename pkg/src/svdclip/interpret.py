"""Per-head residual decomposition, corpus span projection, greedy description
selection, and head ranking by singular-value shift."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .clip_core import DualEncoderModel, encode_images, encode_text
from .errors import (
    ConfigError,
    DegenerateError,
    InputError,
    MissingFileError,
    ShapeError,
)
from .linalg import svd

RANK_TOL = 1e-10


@dataclass
class HeadOutputs:
    layer: int
    head: int
    outputs: np.ndarray  # (num_images, width)
    space: str = "joint"


@dataclass
class CorpusFeatures:
    texts: list
    embeddings: np.ndarray

    def __post_init__(self):
        if len(self.texts) != self.embeddings.shape[0]:
            raise ShapeError(f"{len(self.texts)} texts vs {self.embeddings.shape[0]} embedding rows")


@dataclass
class HeadReport:
    layer: int
    head: int
    score: float
    v_score: float = 0.0
    o_score: float = 0.0
    top_descriptions: list = field(default_factory=list)

    @property
    def label(self) -> str:
        return f"L{self.layer}.H{self.head}"


# ------------------------------------------------------------------ decomposition


def _check_layer_head(encoder, layer, head):
    cfg = encoder.config
    if not 0 <= layer < cfg.num_layers:
        raise InputError(f"layer {layer} out of range [0, {cfg.num_layers})")
    if not 0 <= head < cfg.num_heads:
        raise InputError(f"head {head} out of range [0, {cfg.num_heads})")


def _head_contribution(encoder, trace, layer, head):
    """Class-token residual contribution of one head: sum_i a_0i (v_i W_O[head rows])."""
    cache = trace.attn_caches[layer]
    d = encoder.config.head_dim
    alpha = cache["attn"][:, head, 0, :]
    mixed = np.einsum("bl,bld->bd", alpha, cache["v"][:, head])
    w_o = encoder.layers[layer].o.effective_weight()
    return mixed @ w_o[head * d : (head + 1) * d]


def _to_joint(model, trace, contrib):
    """Push a residual-stream piece through the (per-image frozen) final norm and projection."""
    _, inv_std = trace.final_ln
    centred = contrib - contrib.mean(axis=-1, keepdims=True)
    return (centred * inv_std * model.vision.lnf_gain) @ model.proj_v


def collect_head_outputs(model: DualEncoderModel, probe_patches, layer: int, head: int,
                         space: str = "joint") -> HeadOutputs:
    """Per-image output of one vision head on the class token.

    ``space="residual"`` returns the raw residual-stream vectors; ``"joint"``
    maps them linearly into the shared embedding space, using each image's own
    final-norm scale, so all pieces sum to the unnormalised image embedding.
    """
    if space not in ("joint", "residual"):
        raise ConfigError(f"unknown space {space!r}")
    _check_layer_head(model.vision, layer, head)
    _, cache = encode_images(model, probe_patches)
    trace = cache["trace"]
    contrib = _head_contribution(model.vision, trace, layer, head)
    if space == "joint":
        contrib = _to_joint(model, trace, contrib)
    return HeadOutputs(layer, head, contrib, space)


def residual_decomposition(model: DualEncoderModel, probe_patches):
    """All additive pieces of the final class-token residual, keyed by source.

    Keys: ``"embed"``, ``("head", l, h)``, ``("attn_bias", l)``, ``("mlp", l)``.
    """
    _, cache = encode_images(model, probe_patches)
    trace = cache["trace"]
    enc = model.vision
    parts = {"embed": cache["tokens"][:, 0, :].copy()}
    for l, layer in enumerate(enc.layers):
        for h in range(enc.config.num_heads):
            parts[("head", l, h)] = _head_contribution(enc, trace, l, h)
        b = layer.o.bias
        parts[("attn_bias", l)] = np.broadcast_to(
            0.0 if b is None else b, parts["embed"].shape
        ).copy()
        act = trace.mlp_caches[l]["act"][:, 0, :]
        parts[("mlp", l)] = layer.mlp_out.forward(act)
    return parts, trace


# ------------------------------------------------------------------ corpus


def tokenize_description(text: str, vocab_size: int, max_len: int) -> np.ndarray:
    """Map a corpus line to toy-vocabulary ids.

    A line of integers is taken literally; anything else is split on
    whitespace and each lower-cased word hashed into the vocabulary.
    """
    words = text.split()
    if not words:
        raise InputError("empty description")
    try:
        ids = [int(w) for w in words]
    except ValueError:
        ids = [
            int.from_bytes(hashlib.blake2b(w.lower().encode("utf-8"), digest_size=8).digest(), "little")
            % vocab_size
            for w in words
        ]
    ids = ids[:max_len]
    if min(ids) < 0 or max(ids) >= vocab_size:
        raise InputError(f"token id out of vocabulary in {text!r}")
    return np.asarray(ids, dtype=np.int64)


def load_corpus(path) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [line.strip() for line in fh]
    except FileNotFoundError as exc:
        raise MissingFileError(f"no such file: {path}") from exc
    return [line for line in lines if line]


def embed_corpus(model: DualEncoderModel, texts) -> CorpusFeatures:
    cfg = model.config
    rows = [encode_text(model, tokenize_description(t, cfg.vocab_size, cfg.max_text_len)) for t in texts]
    emb = np.stack(rows) if rows else np.zeros((0, cfg.embed_dim))
    return CorpusFeatures(list(texts), emb)


# ------------------------------------------------------------------ TextSpan


def row_space_basis(x) -> np.ndarray:
    """Orthonormal basis (columns) of the row space of ``x``; pseudo-inverse cut at 1e-10."""
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x):
        raise DegenerateError("head outputs are identically zero")
    f = svd(x)
    keep = f.s > RANK_TOL * f.s[0]
    return f.v[:, keep]


def project_corpus(head_out: HeadOutputs, corpus: CorpusFeatures):
    """Project corpus embeddings onto span of the head outputs.

    Returns ``(projected, similarity)`` with ``similarity = X @ projected.T``.
    """
    x = head_out.outputs
    t = np.asarray(corpus.embeddings, dtype=np.float64)
    if t.shape[1] != x.shape[1]:
        raise ShapeError(f"corpus width {t.shape[1]} does not match head outputs {x.shape[1]}")
    basis = row_space_basis(x)
    projected = (t @ basis) @ basis.T
    return projected, x @ projected.T


@dataclass
class TextSpanResult:
    indices: list
    explained: list
    early_stop: bool = False


def textspan_select(similarity, projected, m: int) -> TextSpanResult:
    """Greedy description picking with deflation.

    Each round scores every remaining text by the variance of the head outputs
    along its unit direction, takes the best (lowest index on ties), and removes
    that direction from the outputs and all remaining texts. Works on the
    similarity matrix alone: deflating both sides maps column ``i`` to
    ``P_i - P_j (t_j . t_i) / |t_j|^2``.
    """
    p = np.array(similarity, dtype=np.float64)
    t = np.array(projected, dtype=np.float64)
    n_texts = t.shape[0]
    if p.shape[1] != n_texts:
        raise ShapeError(f"similarity has {p.shape[1]} columns for {n_texts} texts")
    if m > n_texts:
        raise ConfigError(f"cannot pick {m} of {n_texts} texts")
    p -= p.mean(axis=0, keepdims=True)
    norms0 = np.einsum("ij,ij->i", t, t)
    scale = norms0.max() if n_texts else 0.0
    total = None
    chosen, explained = [], []
    for _ in range(max(m, 0)):
        norms = np.einsum("ij,ij->i", t, t)
        alive = norms > 1e-20 * scale
        alive[chosen] = False
        scores = np.zeros(n_texts)
        scores[alive] = np.einsum("ij,ij->j", p[:, alive], p[:, alive]) / norms[alive]
        if total is None:
            total = scores.max() if scores.size else 0.0
        j = int(np.argmax(scores))
        if not alive.any() or scores[j] <= 1e-12 * max(total, 1e-300):
            return TextSpanResult(chosen, explained, early_stop=True)
        chosen.append(j)
        explained.append(float(scores[j]))
        coef = (t @ t[j]) / norms[j]
        p -= np.outer(p[:, j], coef)
        t -= np.outer(coef, t[j])
    return TextSpanResult(chosen, explained)


def textspan(head_out: HeadOutputs, corpus: CorpusFeatures, m: int):
    """Project, select and report explained-variance ratios for one head."""
    projected, sim = project_corpus(head_out, corpus)
    result = textspan_select(sim, projected, m)
    xc = head_out.outputs - head_out.outputs.mean(axis=0, keepdims=True)
    total = float(np.einsum("ij,ij->", xc, xc))
    ratios = [e / total if total > 0 else 0.0 for e in result.explained]
    return result, ratios


# ------------------------------------------------------------------ head ranking


def _normalized_change(before, after):
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    denom = before.sum()
    if denom == 0:
        return 0.0
    return float(np.abs(after - before).sum() / denom)


def _v_head_spectrum(model, layer, head, record, which):
    enc = model.vision
    v_lins = enc.layers[layer].v
    name = f"vision.enc.layers.{layer}.attn.v.{head}.s_current"
    if record is not None and len(v_lins) > 1 and name in record.s_initial:
        return (record.s_initial if which == "before" else record.s_final)[name]
    if len(v_lins) > 1 and v_lins[head].kind == "svd":
        return v_lins[head].s_current
    d = enc.config.head_dim
    w = np.concatenate([lin.effective_weight() for lin in v_lins], axis=1)
    return svd(w[:, head * d : (head + 1) * d]).s


def _o_head_spectrum(model, layer, head):
    d = model.vision.config.head_dim
    w_o = model.vision.layers[layer].o.effective_weight()
    return svd(w_o[head * d : (head + 1) * d]).s


def default_layers(model, last: int = 4):
    n = model.vision.config.num_layers
    return range(max(0, n - last), n)


def rank_heads(record, model_before: DualEncoderModel, model_after: DualEncoderModel,
               layers=None) -> list:
    """Vision heads sorted by normalised singular-value change of their V and O pieces.

    Per matrix the change is ``sum|s_after - s_before| / sum s_before``; the V
    part pairs trained values index-by-index, the O part compares the sorted
    spectra of the head's row block of W_O. Ties keep (layer, head) order.
    """
    if model_before.config != model_after.config:
        raise ConfigError("before/after checkpoints have different architectures")
    if layers is None:
        layers = default_layers(model_before)
    reports = []
    for layer in layers:
        for head in range(model_before.vision.config.num_heads):
            _check_layer_head(model_before.vision, layer, head)
            v_before = _v_head_spectrum(model_before, layer, head, record, "before")
            v_after = _v_head_spectrum(model_after, layer, head, record, "after")
            v_score = _normalized_change(v_before, v_after)
            o_score = _normalized_change(
                _o_head_spectrum(model_before, layer, head), _o_head_spectrum(model_after, layer, head)
            )
            reports.append(HeadReport(layer, head, v_score + o_score, v_score, o_score))
    reports.sort(key=lambda r: (-r.score, r.layer, r.head))
    return reports


def span_alignment(before, after, side: str = "column") -> np.ndarray:
    """Principal cosines between the column (or row) spaces of two weight matrices.

    Accepts layers (anything with ``effective_weight``) or plain matrices.
    """
    wb = before.effective_weight() if hasattr(before, "effective_weight") else np.asarray(before, float)
    wa = after.effective_weight() if hasattr(after, "effective_weight") else np.asarray(after, float)
    if wb.shape != wa.shape:
        raise ShapeError(f"cannot align spans of {wb.shape} and {wa.shape}")
    if side == "row":
        wb, wa = wb.T, wa.T
    elif side != "column":
        raise ConfigError(f"unknown side {side!r}")

    def basis(w):
        f = svd(w)
        if f.s[0] == 0:
            raise DegenerateError("zero matrix has no column space")
        return f.u[:, f.s > RANK_TOL * f.s[0]]

    return svd(basis(wb).T @ basis(wa)).s
