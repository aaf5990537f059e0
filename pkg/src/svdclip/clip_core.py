"""Dual image/text encoder, shared embedding space and zero-shot classification."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import (
    Encoder,
    EncoderConfig,
    build_encoder_from_arrays,
    encoder_backward_full,
    encoder_forward,
    init_encoder,
)
from .errors import ConfigError, InputError, ShapeError
from .linalg import make_rng, softmax_rows
from .svd_param import RankMaskSpec

FROZEN_PREFIXES = ("vision.", "text.")


@dataclass(frozen=True)
class ModelConfig:
    vision: EncoderConfig
    text: EncoderConfig
    embed_dim: int
    patch_dim: int
    num_patches: int
    vocab_size: int
    max_text_len: int
    qkv_granularity: str = "head"
    init_std: float = 0.02
    tau_init: float = 0.07

    def __post_init__(self):
        for name in ("embed_dim", "patch_dim", "num_patches", "vocab_size", "max_text_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.qkv_granularity not in ("head", "full"):
            raise ConfigError(f"unknown qkv granularity {self.qkv_granularity!r}")
        if not self.tau_init > 0:
            raise ConfigError("tau_init must be positive")

    def to_dict(self):
        return {
            "vision": self.vision.to_dict(),
            "text": self.text.to_dict(),
            "embed_dim": self.embed_dim,
            "patch_dim": self.patch_dim,
            "num_patches": self.num_patches,
            "vocab_size": self.vocab_size,
            "max_text_len": self.max_text_len,
            "qkv_granularity": self.qkv_granularity,
            "init_std": self.init_std,
            "tau_init": self.tau_init,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["vision"] = EncoderConfig(**d["vision"])
        d["text"] = EncoderConfig(**d["text"])
        return cls(**d)


@dataclass
class EmbeddingBatch:
    rows: np.ndarray
    role: str = "T"

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.role not in ("V", "T"):
            raise ConfigError(f"role must be 'V' or 'T', got {self.role!r}")
        norms = np.linalg.norm(self.rows, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise InputError("embedding rows must have unit L2 norm")


@dataclass
class DualEncoderModel:
    config: ModelConfig
    vision: Encoder
    text: Encoder
    patch_w: np.ndarray
    patch_b: np.ndarray
    cls_v: np.ndarray
    pos_v: np.ndarray
    proj_v: np.ndarray
    tok_table: np.ndarray
    cls_t: np.ndarray
    pos_t: np.ndarray
    proj_t: np.ndarray
    logit_scale: np.ndarray

    @property
    def kind(self) -> str:
        return self.vision.kind

    @property
    def tau(self) -> float:
        return math.exp(-float(self.logit_scale[0]))

    def mark_updated(self):
        self.vision.mark_updated()
        self.text.mark_updated()

    def embedding_arrays(self):
        return {
            "vision.patch_w": self.patch_w,
            "vision.patch_b": self.patch_b,
            "vision.cls": self.cls_v,
            "vision.pos": self.pos_v,
            "vision.proj": self.proj_v,
            "text.tok": self.tok_table,
            "text.cls": self.cls_t,
            "text.pos": self.pos_t,
            "text.proj": self.proj_t,
            "logit_scale": self.logit_scale,
        }

    def named_arrays(self):
        out = dict(self.embedding_arrays())
        for tag, enc in (("vision", self.vision), ("text", self.text)):
            for name, arr in enc.named_arrays().items():
                out[f"{tag}.enc.{name}"] = arr
        return out

    def named_trainables(self):
        out = []
        if self.kind == "dense":
            out += [(n, a, None) for n, a in self.embedding_arrays().items()]
        for tag, enc in (("vision", self.vision), ("text", self.text)):
            out += [(f"{tag}.enc.{n}", a, m) for n, a, m in enc.named_trainables()]
        return out

    def decomposed(self, mask_spec: RankMaskSpec | None = None) -> "DualEncoderModel":
        """Copy with every encoder matrix replaced by its SVD layer; other arrays copied."""
        g = self.config.qkv_granularity
        arrays = {k: v.copy() for k, v in self.embedding_arrays().items()}
        return DualEncoderModel(
            self.config,
            self.vision.decomposed(mask_spec, g),
            self.text.decomposed(mask_spec, g),
            *(arrays[k] for k in _EMBED_ORDER),
        )

    def set_mask(self, mask_spec: RankMaskSpec):
        for enc in (self.vision, self.text):
            for _, lin in enc.named_linears():
                lin.set_mask(mask_spec)


_EMBED_ORDER = (
    "vision.patch_w",
    "vision.patch_b",
    "vision.cls",
    "vision.pos",
    "vision.proj",
    "text.tok",
    "text.cls",
    "text.pos",
    "text.proj",
    "logit_scale",
)


def init_model(config: ModelConfig, seed: int) -> DualEncoderModel:
    """Dense model with small random weights; the class token dominates at init."""
    rng = make_rng(seed)
    Dv, Dt, D = config.vision.embed_dim, config.text.embed_dim, config.embed_dim
    std = config.init_std
    vision = init_encoder(config.vision, rng, std)
    text = init_encoder(config.text, rng, std)
    return DualEncoderModel(
        config,
        vision,
        text,
        rng.standard_normal((config.patch_dim, Dv)) * std,
        np.zeros(Dv),
        rng.standard_normal(Dv) / math.sqrt(Dv),
        rng.standard_normal((config.num_patches + 1, Dv)) * std,
        rng.standard_normal((Dv, D)) / math.sqrt(Dv),
        rng.standard_normal((config.vocab_size, Dt)) * std,
        rng.standard_normal(Dt) / math.sqrt(Dt),
        rng.standard_normal((config.max_text_len + 1, Dt)) * std,
        rng.standard_normal((Dt, D)) / math.sqrt(Dt),
        np.array([math.log(1.0 / config.tau_init)]),
    )


def model_from_arrays(config: ModelConfig, kind: str, arrays) -> DualEncoderModel:
    def sub(prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix)}

    g = config.qkv_granularity
    vision = build_encoder_from_arrays(config.vision, kind, g, sub("vision.enc."))
    text = build_encoder_from_arrays(config.text, kind, g, sub("text.enc."))
    return DualEncoderModel(
        config, vision, text, *(np.array(arrays[k], dtype=np.float64) for k in _EMBED_ORDER)
    )


# ------------------------------------------------------------------ encoding


def _normalize(y):
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    return y / norm, norm


def _normalize_backward(e, norm, de):
    return (de - e * (e * de).sum(axis=-1, keepdims=True)) / norm


def image_tokens(model: DualEncoderModel, patches):
    patches = np.asarray(patches, dtype=np.float64)
    cfg = model.config
    if patches.ndim != 3 or patches.shape[1:] != (cfg.num_patches, cfg.patch_dim):
        raise ShapeError(
            f"patches {patches.shape} do not match (batch, {cfg.num_patches}, {cfg.patch_dim})"
        )
    emb = patches @ model.patch_w + model.patch_b
    cls = np.broadcast_to(model.cls_v, (patches.shape[0], 1, model.cls_v.shape[0]))
    return np.concatenate([cls, emb], axis=1) + model.pos_v


def _check_ids(model, ids):
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"token ids must be (batch, length), got {ids.shape}")
    if ids.shape[1] > model.config.max_text_len:
        raise InputError(f"text length {ids.shape[1]} exceeds {model.config.max_text_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise InputError(f"token id out of vocabulary [0, {model.config.vocab_size})")
    if not np.issubdtype(ids.dtype, np.integer):
        if np.any(ids != np.round(ids)):
            raise InputError("token ids must be integers")
        ids = ids.astype(np.int64)
    return ids


def text_tokens(model: DualEncoderModel, ids):
    ids = _check_ids(model, ids)
    emb = model.tok_table[ids]
    cls = np.broadcast_to(model.cls_t, (ids.shape[0], 1, model.cls_t.shape[0]))
    return np.concatenate([cls, emb], axis=1) + model.pos_t[: ids.shape[1] + 1]


def encode_images(model: DualEncoderModel, patches):
    """Batched image embedding; returns ``(unit rows (B, D), cache)``."""
    tokens = image_tokens(model, patches)
    pooled, trace = encoder_forward(model.vision, tokens)
    emb, norm = _normalize(pooled @ model.proj_v)
    return emb, {"tokens": tokens, "trace": trace, "pooled": pooled, "emb": emb, "norm": norm,
                 "input": np.asarray(patches, dtype=np.float64)}


def encode_texts(model: DualEncoderModel, ids):
    """Batched text embedding for equal-length id rows."""
    ids = _check_ids(model, ids)
    tokens = text_tokens(model, ids)
    pooled, trace = encoder_forward(model.text, tokens)
    emb, norm = _normalize(pooled @ model.proj_t)
    return emb, {"tokens": tokens, "trace": trace, "pooled": pooled, "emb": emb, "norm": norm,
                 "input": ids}


def encode_image(model: DualEncoderModel, patches) -> np.ndarray:
    return encode_images(model, np.asarray(patches, dtype=np.float64)[None])[0][0]


def encode_text(model: DualEncoderModel, token_ids) -> np.ndarray:
    return encode_texts(model, np.asarray(token_ids).reshape(1, -1))[0][0]


def backward_images(model: DualEncoderModel, cache, d_emb):
    """Gradients of ``sum(d_emb * emb)`` for the trainable arrays of the vision tower."""
    dy = _normalize_backward(cache["emb"], cache["norm"], d_emb)
    dpooled = dy @ model.proj_v.T
    grads, dtok = encoder_backward_full(model.vision, cache["trace"], dpooled)
    out = {f"vision.enc.{k}": v for k, v in grads.items()}
    if model.kind == "dense":
        out["vision.proj"] = cache["pooled"].T @ dy
        out["vision.pos"] = dtok.sum(axis=0)
        out["vision.cls"] = dtok[:, 0, :].sum(axis=0)
        dpatch = dtok[:, 1:, :]
        x = cache["input"]
        out["vision.patch_w"] = x.reshape(-1, x.shape[-1]).T @ dpatch.reshape(-1, dpatch.shape[-1])
        out["vision.patch_b"] = dpatch.sum(axis=(0, 1))
    return out


def backward_texts(model: DualEncoderModel, cache, d_emb):
    dy = _normalize_backward(cache["emb"], cache["norm"], d_emb)
    dpooled = dy @ model.proj_t.T
    grads, dtok = encoder_backward_full(model.text, cache["trace"], dpooled)
    out = {f"text.enc.{k}": v for k, v in grads.items()}
    if model.kind == "dense":
        ids = cache["input"]
        out["text.proj"] = cache["pooled"].T @ dy
        dpos = np.zeros_like(model.pos_t)
        dpos[: ids.shape[1] + 1] = dtok.sum(axis=0)
        out["text.pos"] = dpos
        out["text.cls"] = dtok[:, 0, :].sum(axis=0)
        dtab = np.zeros_like(model.tok_table)
        np.add.at(dtab, ids, dtok[:, 1:, :])
        out["text.tok"] = dtab
    return out


# ------------------------------------------------------------------ classification


def _rows(x):
    return x.rows if isinstance(x, EmbeddingBatch) else np.atleast_2d(np.asarray(x, float))


def class_probabilities(image_emb, class_embs, tau: float) -> np.ndarray:
    """Softmax over cosine similarity / tau. Works for one image or a batch of rows."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    img = np.asarray(image_emb, dtype=np.float64)
    probs = softmax_rows(np.atleast_2d(img) @ _rows(class_embs).T / tau)
    return probs[0] if img.ndim == 1 else probs


def predict(image_emb, class_embs, tau: float = 1.0):
    """Arg-max class; ``np.argmax`` returns the lowest index on ties.

    Decided on raw similarities, which is the same order as the probabilities.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    img = np.asarray(image_emb, dtype=np.float64)
    sims = np.atleast_2d(img) @ _rows(class_embs).T
    idx = np.argmax(sims, axis=1)
    return int(idx[0]) if img.ndim == 1 else idx
