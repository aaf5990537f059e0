"""Pre-norm transformer encoder with hand-written forward and reverse passes.

Activations are batched as ``(batch, tokens, width)``. Every linear map is a
:class:`~svdclip.svd_param.DenseLinear` (pretraining) or
:class:`~svdclip.svd_param.SvdLinear` (adaptation); the same code path drives
both, and the reverse pass hands each layer its own input/output gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .linalg import layer_norm_backward, layer_norm_forward, softmax_rows
from .svd_param import DenseLinear, RankMaskSpec, SvdLinear, decompose_layer

ACTIVATIONS = ("relu", "gelu")
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int
    num_heads: int
    mlp_dim: int
    num_layers: int
    activation: str = "relu"

    def __post_init__(self):
        for name in ("embed_dim", "num_heads", "mlp_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self):
        return {
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
            "mlp_dim": self.mlp_dim,
            "num_layers": self.num_layers,
            "activation": self.activation,
        }


@dataclass
class EncoderLayer:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    q: list
    k: list
    v: list
    o: object
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    mlp_in: object
    mlp_out: object

    def named_linears(self):
        for proj in ("q", "k", "v"):
            for h, lin in enumerate(getattr(self, proj)):
                yield f"attn.{proj}.{h}", lin
        yield "attn.o", self.o
        yield "mlp.in", self.mlp_in
        yield "mlp.out", self.mlp_out

    def norm_arrays(self):
        return {
            "ln1.gain": self.ln1_gain,
            "ln1.bias": self.ln1_bias,
            "ln2.gain": self.ln2_gain,
            "ln2.bias": self.ln2_bias,
        }


@dataclass
class Encoder:
    config: EncoderConfig
    layers: list
    lnf_gain: np.ndarray
    lnf_bias: np.ndarray
    version: int = 0

    @property
    def kind(self) -> str:
        if not self.layers:
            return "dense"
        return self.layers[0].o.kind

    def mark_updated(self):
        self.version += 1

    def named_linears(self):
        for i, layer in enumerate(self.layers):
            for name, lin in layer.named_linears():
                yield f"layers.{i}.{name}", lin

    def named_arrays(self):
        """Every array of the encoder, keyed by a stable dotted name."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.norm_arrays().items():
                out[f"layers.{i}.{name}"] = arr
            for name, lin in layer.named_linears():
                for key, arr in lin.arrays().items():
                    out[f"layers.{i}.{name}.{key}"] = arr
        out["ln_final.gain"] = self.lnf_gain
        out["ln_final.bias"] = self.lnf_bias
        return out

    def named_trainables(self):
        """``(name, array, mask)`` for what the optimiser may touch.

        A dense encoder trains everything (mask ``None``); a decomposed one
        trains only singular values, under each layer's rank mask.
        """
        out = []
        if self.kind == "dense":
            for name, arr in self.named_arrays().items():
                out.append((name, arr, None))
            return out
        for prefix, lin in self.named_linears():
            for key, arr, mask in lin.trainables():
                out.append((f"{prefix}.{key}", arr, mask))
        return out

    def decomposed(self, mask_spec: RankMaskSpec | None = None, qkv_granularity="head"):
        """SVD copy of a dense encoder; norms are copied, not shared."""
        if self.kind != "dense":
            raise UsageError("encoder is already decomposed")
        if qkv_granularity not in ("head", "full"):
            raise ConfigError(f"unknown qkv granularity {qkv_granularity!r}")
        mask_spec = mask_spec or RankMaskSpec()
        G, d = self.config.num_heads, self.config.head_dim

        def split(lins):
            (lin,) = lins
            if qkv_granularity == "full":
                return [decompose_layer(lin.w, lin.b, mask_spec)]
            return [
                decompose_layer(
                    lin.w[:, h * d : (h + 1) * d],
                    None if lin.b is None else lin.b[h * d : (h + 1) * d],
                    mask_spec,
                )
                for h in range(G)
            ]

        layers = []
        for layer in self.layers:
            layers.append(
                EncoderLayer(
                    layer.ln1_gain.copy(),
                    layer.ln1_bias.copy(),
                    split(layer.q),
                    split(layer.k),
                    split(layer.v),
                    decompose_layer(layer.o.w, layer.o.b, mask_spec),
                    layer.ln2_gain.copy(),
                    layer.ln2_bias.copy(),
                    decompose_layer(layer.mlp_in.w, layer.mlp_in.b, mask_spec),
                    decompose_layer(layer.mlp_out.w, layer.mlp_out.b, mask_spec),
                )
            )
        return Encoder(self.config, layers, self.lnf_gain.copy(), self.lnf_bias.copy())


def init_encoder(config: EncoderConfig, rng: np.random.Generator, init_std=0.02) -> Encoder:
    """Dense encoder with N(0, init_std^2) weights, zero biases and unit norm gains."""
    D, M = config.embed_dim, config.mlp_dim

    def dense(rows, cols):
        return DenseLinear(rng.standard_normal((rows, cols)) * init_std, np.zeros(cols))

    layers = []
    for _ in range(config.num_layers):
        layers.append(
            EncoderLayer(
                np.ones(D),
                np.zeros(D),
                [dense(D, D)],
                [dense(D, D)],
                [dense(D, D)],
                dense(D, D),
                np.ones(D),
                np.zeros(D),
                dense(D, M),
                dense(M, D),
            )
        )
    return Encoder(config, layers, np.ones(D), np.zeros(D))


def build_encoder_from_arrays(config: EncoderConfig, kind, qkv_granularity, arrays) -> Encoder:
    """Inverse of :meth:`Encoder.named_arrays` (used by checkpoint loading)."""
    G = config.num_heads if (kind == "svd" and qkv_granularity == "head") else 1

    def lin(prefix):
        sub = {k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
        if kind == "dense":
            return DenseLinear(np.array(sub["w"]), None if "b" not in sub else np.array(sub["b"]))
        return SvdLinear.from_arrays(sub)

    layers = []
    for i in range(config.num_layers):
        p = f"layers.{i}"
        layers.append(
            EncoderLayer(
                np.array(arrays[f"{p}.ln1.gain"]),
                np.array(arrays[f"{p}.ln1.bias"]),
                [lin(f"{p}.attn.q.{h}") for h in range(G)],
                [lin(f"{p}.attn.k.{h}") for h in range(G)],
                [lin(f"{p}.attn.v.{h}") for h in range(G)],
                lin(f"{p}.attn.o"),
                np.array(arrays[f"{p}.ln2.gain"]),
                np.array(arrays[f"{p}.ln2.bias"]),
                lin(f"{p}.mlp.in"),
                lin(f"{p}.mlp.out"),
            )
        )
    return Encoder(
        config, layers, np.array(arrays["ln_final.gain"]), np.array(arrays["ln_final.bias"])
    )


# ------------------------------------------------------------------ forward


def _as_batch(x, width):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != width:
        raise ShapeError(f"tokens of shape {x.shape} do not match width {width}")
    return x, single


def _apply_concat(lins, x):
    return np.concatenate([lin.forward(x) for lin in lins], axis=-1)


def _backward_concat(lins, x, dy, grads, prefix):
    dx = np.zeros_like(x)
    start = 0
    for h, lin in enumerate(lins):
        width = lin.shape[1]
        dxi, g = lin.backward(x, dy[..., start : start + width])
        start += width
        dx += dxi
        for key, val in g.items():
            grads[f"{prefix}.{h}.{key}"] = val
    return dx


def _split_heads(x, G):
    B, L, D = x.shape
    return x.reshape(B, L, G, D // G).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, G, L, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, G * d)


def _mhsa(layer: EncoderLayer, x, num_heads):
    h1, ln = layer_norm_forward(x, layer.ln1_gain, layer.ln1_bias)
    q = _split_heads(_apply_concat(layer.q, h1), num_heads)
    k = _split_heads(_apply_concat(layer.k, h1), num_heads)
    v = _split_heads(_apply_concat(layer.v, h1), num_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    attn = softmax_rows((q @ k.transpose(0, 1, 3, 2)) * scale)
    z = _merge_heads(attn @ v)
    out = x + layer.o.forward(z)
    cache = {"x": x, "h1": h1, "ln": ln, "q": q, "k": k, "v": v, "attn": attn, "z": z}
    return out, cache


def _activation(pre, kind):
    if kind == "relu":
        return np.maximum(pre, 0.0)
    inner = _GELU_C * (pre + 0.044715 * pre**3)
    return 0.5 * pre * (1.0 + np.tanh(inner))


def _activation_grad(pre, kind):
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    inner = _GELU_C * (pre + 0.044715 * pre**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * pre * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * pre**2)


def _mlp(layer: EncoderLayer, x, activation):
    h2, ln = layer_norm_forward(x, layer.ln2_gain, layer.ln2_bias)
    pre = layer.mlp_in.forward(h2)
    act = _activation(pre, activation)
    out = x + layer.mlp_out.forward(act)
    return out, {"x": x, "h2": h2, "ln": ln, "pre": pre, "act": act}


def mhsa_forward(layer: EncoderLayer, x, num_heads: int | None = None):
    """Attention sub-block ``x + O(concat_h softmax(Q_h K_h^T / sqrt(d)) V_h)`` on ``ln1(x)``.

    ``x`` is ``(L, D)`` or ``(B, L, D)``; the returned cache exposes the
    per-head attention under ``"attn"`` with shape ``(B, G, L, L)``.
    """
    if num_heads is None:
        num_heads = len(layer.q)
    width = layer.ln1_gain.shape[0]
    xb, single = _as_batch(x, width)
    out, cache = _mhsa(layer, xb, num_heads)
    return (out[0] if single else out), cache


def mlp_forward(layer: EncoderLayer, x, activation: str = "relu"):
    xb, single = _as_batch(x, layer.ln2_gain.shape[0])
    out, cache = _mlp(layer, xb, activation)
    return (out[0] if single else out), cache


@dataclass
class ForwardTrace:
    """Activations cached by :func:`encoder_forward` for the reverse pass."""

    attn_caches: list
    mlp_caches: list
    residual: np.ndarray
    final_ln: tuple
    pooled: np.ndarray
    version: int
    encoder_id: int
    single: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def attention(self):
        """Per-layer attention probabilities, each ``(B, G, L, L)``."""
        return [c["attn"] for c in self.attn_caches]


def encoder_forward(encoder: Encoder, tokens):
    """Run the layer stack; pooled output is the final-normed class token (row 0)."""
    cfg = encoder.config
    x, single = _as_batch(tokens, cfg.embed_dim)
    attn_caches, mlp_caches = [], []
    for layer in encoder.layers:
        x, ac = _mhsa(layer, x, cfg.num_heads)
        x, mc = _mlp(layer, x, cfg.activation)
        attn_caches.append(ac)
        mlp_caches.append(mc)
    cls = x[:, 0, :]
    pooled, ln = layer_norm_forward(cls, encoder.lnf_gain, encoder.lnf_bias)
    trace = ForwardTrace(
        attn_caches, mlp_caches, x, ln, pooled, encoder.version, id(encoder), single
    )
    return (pooled[0] if single else pooled), trace


# ------------------------------------------------------------------ backward


def _mlp_backward(layer, cache, dout, grads, prefix, activation, full):
    dm = dout
    dact, g = layer.mlp_out.backward(cache["act"], dm)
    for key, val in g.items():
        grads[f"{prefix}.mlp.out.{key}"] = val
    dpre = dact * _activation_grad(cache["pre"], activation)
    dh2, g = layer.mlp_in.backward(cache["h2"], dpre)
    for key, val in g.items():
        grads[f"{prefix}.mlp.in.{key}"] = val
    dx, dgain, dbias = layer_norm_backward(dh2, layer.ln2_gain, cache["ln"])
    if full:
        grads[f"{prefix}.ln2.gain"] = dgain
        grads[f"{prefix}.ln2.bias"] = dbias
    return dout + dx


def _mhsa_backward(layer, cache, dout, grads, prefix, num_heads, full):
    dz, g = layer.o.backward(cache["z"], dout)
    for key, val in g.items():
        grads[f"{prefix}.attn.o.{key}"] = val
    dzh = _split_heads(dz, num_heads)
    attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
    scale = 1.0 / math.sqrt(q.shape[-1])
    dattn = dzh @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dzh
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
    h1 = cache["h1"]
    dh1 = _backward_concat(layer.q, h1, _merge_heads(dq), grads, f"{prefix}.attn.q")
    dh1 += _backward_concat(layer.k, h1, _merge_heads(dk), grads, f"{prefix}.attn.k")
    dh1 += _backward_concat(layer.v, h1, _merge_heads(dv), grads, f"{prefix}.attn.v")
    dx, dgain, dbias = layer_norm_backward(dh1, layer.ln1_gain, cache["ln"])
    if full:
        grads[f"{prefix}.ln1.gain"] = dgain
        grads[f"{prefix}.ln1.bias"] = dbias
    return dout + dx


def encoder_backward_full(encoder: Encoder, trace: ForwardTrace, grad_pooled):
    """Reverse pass returning ``(grads, d_tokens)``.

    Dense encoders get gradients for every array; decomposed encoders only for
    ``s_current`` of each linear (mask applied).
    """
    if trace.encoder_id != id(encoder) or trace.version != encoder.version:
        raise UsageError("stale trace: encoder changed since this forward pass")
    cfg = encoder.config
    g = np.asarray(grad_pooled, dtype=np.float64)
    if trace.single:
        g = g[None]
    if g.shape != trace.pooled.shape:
        raise ShapeError(f"grad_pooled {g.shape} does not match pooled {trace.pooled.shape}")
    full = encoder.kind == "dense"
    grads = {}
    dcls, dgain, dbias = layer_norm_backward(g, encoder.lnf_gain, trace.final_ln)
    if full:
        grads["ln_final.gain"] = dgain
        grads["ln_final.bias"] = dbias
    dx = np.zeros_like(trace.residual)
    dx[:, 0, :] = dcls
    for i in range(len(encoder.layers) - 1, -1, -1):
        layer = encoder.layers[i]
        prefix = f"layers.{i}"
        dx = _mlp_backward(layer, trace.mlp_caches[i], dx, grads, prefix, cfg.activation, full)
        dx = _mhsa_backward(layer, trace.attn_caches[i], dx, grads, prefix, cfg.num_heads, full)
    if trace.single:
        dx = dx[0]
    return grads, dx


def encoder_backward(encoder: Encoder, trace: ForwardTrace, grad_pooled):
    """Gradient of ``sum(grad_pooled * pooled)`` w.r.t. every trainable array."""
    return encoder_backward_full(encoder, trace, grad_pooled)[0]
