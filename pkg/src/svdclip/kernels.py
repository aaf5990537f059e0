"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The dispatching names (``matmul_kernel``, ``jacobi_orthogonalize``) pick the
backend chosen in :mod:`svdclip._accel`; the ``*_numba`` / ``*_numpy`` pairs are
exported so the benchmark and the tests can run both side by side.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------- matmul


@njit
def matmul_numba(a, b):
    n, kk = a.shape
    m = b.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def matmul_numpy(a, b):
    # rank-1 accumulation keeps the k order identical to the triple loop
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


# ---------------------------------------------------------------- Jacobi


def round_robin_schedule(n):
    """Parallel (tournament) pair ordering for ``n`` columns.

    Returns an int array of shape ``(rounds, pairs, 2)`` with ``p < q`` in every
    pair. For odd ``n`` a phantom column ``n`` is paired each round and must be
    skipped by the caller.
    """
    size = n + (n % 2)
    if size < 2:
        return np.zeros((0, 0, 2), dtype=np.int64)
    players = list(range(size))
    rounds = []
    for _ in range(size - 1):
        pairs = []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            pairs.append((min(p, q), max(p, q)))
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    return np.asarray(rounds, dtype=np.int64)


@njit
def _rotation(alpha, beta, gamma):
    zeta = (beta - alpha) / (2.0 * gamma)
    sign = 1.0 if zeta >= 0.0 else -1.0
    t = sign / (abs(zeta) + math.hypot(1.0, zeta))
    c = 1.0 / math.sqrt(1.0 + t * t)
    return c, c * t


@njit
def jacobi_numba(a, v, schedule, tol, floor, max_sweeps):
    """One-sided Jacobi on the columns of ``a`` (in place); rotations go into ``v``.

    Returns the number of sweeps used, or -1 if ``max_sweeps`` ran out.
    """
    n_rows, n = a.shape
    floor2 = floor * floor
    for sweep in range(max_sweeps):
        rotations = 0
        for r in range(schedule.shape[0]):
            for k in range(schedule.shape[1]):
                p = schedule[r, k, 0]
                q = schedule[r, k, 1]
                if q >= n:
                    continue
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(n_rows):
                    alpha += a[i, p] * a[i, p]
                    beta += a[i, q] * a[i, q]
                    gamma += a[i, p] * a[i, q]
                if alpha <= floor2 or beta <= floor2:
                    continue
                if abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                c, s = _rotation(alpha, beta, gamma)
                for i in range(n_rows):
                    ap = a[i, p]
                    aq = a[i, q]
                    a[i, p] = c * ap - s * aq
                    a[i, q] = s * ap + c * aq
                for i in range(n):
                    vp = v[i, p]
                    vq = v[i, q]
                    v[i, p] = c * vp - s * vq
                    v[i, q] = s * vp + c * vq
                rotations += 1
        if rotations == 0:
            return sweep + 1
    return -1


def jacobi_numpy(a, v, schedule, tol, floor, max_sweeps):
    """Vectorised twin of :func:`jacobi_numba`: each round's disjoint pairs rotate at once."""
    n = a.shape[1]
    floor2 = floor * floor
    rounds = []
    for pairs in schedule:
        keep = pairs[:, 1] < n
        rounds.append((pairs[keep, 0], pairs[keep, 1]))
    for sweep in range(max_sweeps):
        rotations = 0
        for p, q in rounds:
            if p.size == 0:
                continue
            ap = a[:, p]
            aq = a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = (alpha > floor2) & (beta > floor2)
            active &= np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotations += int(active.sum())
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp = v[:, p]
            vq = v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if rotations == 0:
            return sweep + 1
    return -1


if USE_NUMBA:
    matmul_kernel = matmul_numba
    jacobi_orthogonalize = jacobi_numba
else:
    matmul_kernel = matmul_numpy
    jacobi_orthogonalize = jacobi_numpy
