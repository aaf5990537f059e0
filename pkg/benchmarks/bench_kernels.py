"""Time the numba and pure-numpy kernels on identical inputs.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Both backends are imported from ``svdclip.kernels`` directly, so the
``SVDCLIP_BACKEND`` flag does not matter here. The first numba call is timed
separately (compile or cache load) and excluded from the steady-state numbers.
"""

import argparse
import json
import platform
import time

import numpy as np

from svdclip import kernels
from svdclip._accel import HAVE_NUMBA
from svdclip.linalg import SVD_FLOOR_REL, SVD_MAX_SWEEPS, SVD_ROTATION_TOL, make_rng

MATMUL_SHAPES = [(32, 32, 32), (64, 64, 64), (128, 64, 128)]
SVD_SHAPES = [(32, 8), (64, 16), (64, 64), (256, 64)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def jacobi_call(kernel, w):
    n = w.shape[1]
    schedule = kernels.round_robin_schedule(n)
    floor = SVD_FLOOR_REL * float(np.linalg.norm(w))

    def run():
        a = np.array(w, order="C")
        v = np.eye(n)
        sweeps = kernel(a, v, schedule, SVD_ROTATION_TOL, floor, SVD_MAX_SWEEPS)
        return a, v, sweeps

    return run


def bench(repeat):
    rng = make_rng(0)
    rows = []
    for m, k, n in MATMUL_SHAPES:
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        first = best_of(lambda a=a, b=b: kernels.matmul_numba(a, b), 1) if HAVE_NUMBA else None
        t_numba = best_of(lambda a=a, b=b: kernels.matmul_numba(a, b), repeat) if HAVE_NUMBA else None
        t_numpy = best_of(lambda a=a, b=b: kernels.matmul_numpy(a, b), repeat)
        same = bool(np.array_equal(kernels.matmul_numba(a, b), kernels.matmul_numpy(a, b)))
        rows.append({"kernel": "matmul", "shape": f"{m}x{k}@{k}x{n}", "numba_first_s": first,
                     "numba_s": t_numba, "numpy_s": t_numpy, "agree": same})
    for m, n in SVD_SHAPES:
        w = rng.standard_normal((m, n))
        run_nb = jacobi_call(kernels.jacobi_numba, w)
        run_np = jacobi_call(kernels.jacobi_numpy, w)
        first = best_of(run_nb, 1) if HAVE_NUMBA else None
        t_numba = best_of(run_nb, repeat) if HAVE_NUMBA else None
        t_numpy = best_of(run_np, repeat)
        (a1, _, _), (a2, _, _) = run_nb(), run_np()
        s1 = np.sort(np.linalg.norm(a1, axis=0))
        s2 = np.sort(np.linalg.norm(a2, axis=0))
        rows.append({"kernel": "jacobi", "shape": f"{m}x{n}", "numba_first_s": first,
                     "numba_s": t_numba, "numpy_s": t_numpy,
                     "agree": bool(np.allclose(s1, s2, rtol=1e-12, atol=1e-12 * s1.max()))})
    return rows


def fmt(t):
    return "     n/a" if t is None else f"{t * 1e3:8.3f}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    rows = bench(args.repeat)
    print(f"python {platform.python_version()}, numpy {np.__version__}, numba available: {HAVE_NUMBA}")
    print(f"{'kernel':<8}{'shape':<16}{'first ms':>10}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for r in rows:
        speed = "" if r["numba_s"] is None else f"{r['numpy_s'] / r['numba_s']:8.1f}x"
        print(f"{r['kernel']:<8}{r['shape']:<16}{fmt(r['numba_first_s']):>10}{fmt(r['numba_s']):>10}"
              f"{fmt(r['numpy_s']):>10}{speed:>9}  {r['agree']}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
