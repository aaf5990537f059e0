"""Dense linear algebra on float64 arrays: matmul, thin SVD, softmax, layer norm.

A "matrix" throughout the package is a 2-D C-contiguous ``numpy.float64``
array; batched encoder code uses 3-D/4-D arrays with the same conventions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InputError, NumericError, ShapeError

LAYER_NORM_EPS = 1e-5
SVD_MAX_SWEEPS = 60
SVD_ROTATION_TOL = 1e-14
SVD_FLOOR_REL = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator on the Philox-4x64 counter-based bit generator."""
    return np.random.Generator(np.random.Philox(int(seed)))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation over the inner index."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return kernels.matmul_kernel(a, b)


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    source_rows: int
    source_cols: int

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def recompose(self, s=None) -> np.ndarray:
        s = self.s if s is None else s
        return (self.u * s) @ self.v.T


def _complete_basis(u: np.ndarray, missing: np.ndarray) -> None:
    """Replace columns ``missing`` of ``u`` with unit vectors orthogonal to the rest."""
    good = [j for j in range(u.shape[1]) if j not in set(missing.tolist())]
    basis = [u[:, j] for j in good]
    candidate = 0
    for j in missing:
        while True:
            e = np.zeros(u.shape[0])
            e[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 0.5:
                break
        u[:, j] = e / norm
        basis.append(u[:, j])


def svd(w) -> SvdFactors:
    """Thin SVD by one-sided Jacobi.

    Works on the taller orientation. Columns whose norm drops below
    ``1e-12 * ||W||_F`` are treated as null directions: their singular value
    is set to zero and the left vector is completed to an orthonormal basis.
    Each left vector is signed so its largest-magnitude entry is positive.
    """
    w = as_matrix(w, "w")
    rows, cols = w.shape
    if rows < 1 or cols < 1:
        raise ShapeError(f"svd needs a non-empty matrix, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InputError("svd input contains non-finite entries")
    transposed = cols > rows
    a = np.array(w.T if transposed else w, dtype=np.float64, order="C")
    n = a.shape[1]
    v = np.eye(n)
    norm_f = float(np.linalg.norm(w))
    floor = SVD_FLOOR_REL * norm_f
    sweeps = kernels.jacobi_orthogonalize(
        a, v, kernels.round_robin_schedule(n), SVD_ROTATION_TOL, floor, SVD_MAX_SWEEPS
    )
    if sweeps < 0:
        gram = a.T @ a
        off = gram - np.diag(np.diag(gram))
        raise NumericError(
            f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps",
            residual=float(np.abs(off).max()),
        )
    s = np.sqrt(np.einsum("ij,ij->j", a, a))
    null = s <= floor
    s[null] = 0.0
    order = np.argsort(-s, kind="stable")
    s = s[order]
    a = a[:, order]
    v = v[:, order]
    null = null[order]
    u = np.zeros_like(a)
    live = ~null
    u[:, live] = a[:, live] / s[live]
    if null.any():
        _complete_basis(u, np.flatnonzero(null))
    if transposed:
        u, v = v, u
    # sign convention: largest |u_ij| in each column is positive
    pivot = np.argmax(np.abs(u), axis=0)
    flip = u[pivot, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdFactors(
        np.ascontiguousarray(u), s, np.ascontiguousarray(v), rows, cols
    )


def softmax_rows(x) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS):
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != (x.shape[-1],) or np.shape(bias) != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm gain/bias {gain.shape}/{np.shape(bias)} do not fit width {x.shape[-1]}"
        )
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_forward(x, gain, bias, eps: float = LAYER_NORM_EPS):
    """Return ``(y, (xhat, inv_std))``; the cache feeds :func:`layer_norm_backward`."""
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def layer_norm_backward(dy, gain, cache):
    """Return ``(dx, dgain, dbias)``; parameter grads are summed over leading axes."""
    xhat, inv_std = cache
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def principal_cosines(a, b) -> np.ndarray:
    """Cosines of the principal angles between span(a) and span(b) (orthonormal columns)."""
    return svd(np.asarray(a).T @ np.asarray(b)).s
