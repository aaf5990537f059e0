"""Linear layers parameterised by a frozen SVD basis and trainable singular values."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .linalg import SvdFactors, as_matrix, svd

MASK_MODES = ("all", "top_k", "bottom_k")


@dataclass(frozen=True)
class RankMaskSpec:
    """Which singular values of each decomposed matrix may train.

    ``k`` is an absolute count; ``ratio`` (in (0, 1]) resolves per matrix to
    ``ceil(ratio * r)`` so one spec can cover matrices of different rank.
    """

    mode: str = "all"
    k: int | None = None
    ratio: float | None = None

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mode!r}")
        if self.mode != "all":
            if (self.k is None) == (self.ratio is None):
                raise ConfigError(f"{self.mode} needs exactly one of k or ratio")
            if self.ratio is not None and not 0.0 < self.ratio <= 1.0:
                raise ConfigError(f"ratio must lie in (0, 1], got {self.ratio}")

    def k_for(self, r: int) -> int:
        if self.mode == "all":
            return r
        k = self.k if self.k is not None else math.ceil(self.ratio * r - 1e-12)
        if not 0 < k <= r:
            raise ConfigError(f"{self.mode} k={k} is out of range for rank {r}")
        return k

    def build(self, r: int) -> np.ndarray:
        mask = np.zeros(r, dtype=bool)
        k = self.k_for(r)
        if self.mode == "bottom_k":
            mask[r - k :] = True
        else:
            mask[:k] = True
        return mask

    def to_dict(self) -> dict:
        return {"mode": self.mode, "k": self.k, "ratio": self.ratio}

    @classmethod
    def from_dict(cls, d) -> "RankMaskSpec":
        return cls(d.get("mode", "all"), d.get("k"), d.get("ratio"))


def _check_input(x, rows):
    if x.shape[-1] != rows:
        raise ShapeError(f"input with shape {x.shape} does not fit weight with {rows} rows")


@dataclass
class DenseLinear:
    """Plain ``x @ w + b`` layer; every array trains. Used before decomposition."""

    w: np.ndarray
    b: np.ndarray | None = None

    kind = "dense"

    @property
    def shape(self):
        return self.w.shape

    @property
    def bias(self):
        return self.b

    def effective_weight(self):
        return self.w

    def forward(self, x):
        _check_input(x, self.w.shape[0])
        y = x @ self.w
        return y if self.b is None else y + self.b

    def backward(self, x, dy):
        lead = tuple(range(dy.ndim - 1))
        x2 = x.reshape(-1, x.shape[-1])
        grads = {"w": x2.T @ dy.reshape(-1, dy.shape[-1])}
        if self.b is not None:
            grads["b"] = dy.sum(axis=lead)
        return dy @ self.w.T, grads

    def arrays(self):
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out

    def trainables(self):
        return [(name, arr, None) for name, arr in self.arrays().items()]


@dataclass
class SvdLinear:
    """``x @ U diag(s) V^T + b`` with U, V, b frozen and only masked-in ``s`` trainable."""

    factors: SvdFactors
    s_current: np.ndarray
    s_initial: np.ndarray
    mask: np.ndarray
    bias: np.ndarray | None = None

    kind = "svd"

    @property
    def shape(self):
        return (self.factors.source_rows, self.factors.source_cols)

    @property
    def rank(self):
        return self.factors.rank

    def effective_weight(self):
        return (self.factors.u * self.s_current) @ self.factors.v.T

    def forward(self, x):
        _check_input(x, self.factors.source_rows)
        y = ((x @ self.factors.u) * self.s_current) @ self.factors.v.T
        return y if self.bias is None else y + self.bias

    def backward(self, x, dy):
        """Return ``(dx, {"s_current": ds})``; ``ds_j = sum_rows (x u_j)(dy v_j)``, masked."""
        xu = (x @ self.factors.u).reshape(-1, self.rank)
        dv = dy @ self.factors.v
        ds = np.einsum("nj,nj->j", xu, dv.reshape(-1, self.rank))
        ds = np.where(self.mask, ds, 0.0)
        dx = (dv * self.s_current) @ self.factors.u.T
        return dx, {"s_current": ds}

    def set_mask(self, mask_spec: RankMaskSpec):
        mask = mask_spec.build(self.rank)
        frozen = ~mask
        if np.any(self.s_current[frozen] != self.s_initial[frozen]):
            raise ConfigError("cannot freeze singular values that already moved")
        self.mask = mask

    def arrays(self):
        out = {
            "u": self.factors.u,
            "v": self.factors.v,
            "s_initial": self.s_initial,
            "s_current": self.s_current,
            "mask": self.mask.astype(np.float64),
        }
        if self.bias is not None:
            out["b"] = self.bias
        return out

    def trainables(self):
        return [("s_current", self.s_current, self.mask)]

    @classmethod
    def from_arrays(cls, arrays) -> "SvdLinear":
        u = as_matrix(arrays["u"])
        v = as_matrix(arrays["v"])
        s_init = np.array(arrays["s_initial"], dtype=np.float64)
        factors = SvdFactors(u, s_init.copy(), v, u.shape[0], v.shape[0])
        return cls(
            factors,
            np.array(arrays["s_current"], dtype=np.float64),
            s_init,
            np.asarray(arrays["mask"]) != 0,
            None if "b" not in arrays else np.array(arrays["b"], dtype=np.float64),
        )


def decompose_layer(w, bias=None, mask_spec: RankMaskSpec | None = None) -> SvdLinear:
    mask_spec = mask_spec or RankMaskSpec()
    factors = svd(w)
    mask = mask_spec.build(factors.rank)
    b = None if bias is None else np.array(bias, dtype=np.float64)
    return SvdLinear(factors, factors.s.copy(), factors.s.copy(), mask, b)


def effective_weight(layer: SvdLinear) -> np.ndarray:
    return layer.effective_weight()


def forward(layer: SvdLinear, x) -> np.ndarray:
    return layer.forward(np.asarray(x, dtype=np.float64))


def grad_singular(layer: SvdLinear, grad_w) -> np.ndarray:
    """Project a dense weight gradient onto the singular values: ``g_j = u_j^T G v_j``."""
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape != layer.shape:
        raise ShapeError(f"weight gradient {grad_w.shape} does not match layer {layer.shape}")
    g = np.einsum("ij,ik,kj->j", layer.factors.u, grad_w, layer.factors.v)
    return np.where(layer.mask, g, 0.0)


def layer_matrix_shapes(enc, qkv_granularity: str = "head"):
    """(name, rows, cols) of every decomposed matrix in one encoder config."""
    D, G, M = enc.embed_dim, enc.num_heads, enc.mlp_dim
    shapes = []
    for layer in range(enc.num_layers):
        for proj in ("q", "k", "v"):
            if qkv_granularity == "head":
                shapes += [(f"{layer}.{proj}.{h}", D, D // G) for h in range(G)]
            else:
                shapes.append((f"{layer}.{proj}.0", D, D))
        shapes += [(f"{layer}.o", D, D), (f"{layer}.mlp_in", D, M), (f"{layer}.mlp_out", M, D)]
    return shapes


def count_trainable(model_config, mask_spec: RankMaskSpec | None = None) -> int:
    """Trainable singular values across both encoders of ``model_config``.

    Accepts anything with ``vision``/``text`` encoder configs, or a list of
    encoder configs.
    """
    mask_spec = mask_spec or RankMaskSpec()
    if hasattr(model_config, "vision"):
        encoders = [model_config.vision, model_config.text]
        granularity = getattr(model_config, "qkv_granularity", "head")
    else:
        encoders = list(model_config)
        granularity = "head"
    total = 0
    for enc in encoders:
        for _, rows, cols in layer_matrix_shapes(enc, granularity):
            total += mask_spec.k_for(min(rows, cols))
    return total
