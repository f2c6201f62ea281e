"""Numba kernels vs their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Times each kernel on representative inputs (CIGRE-like grids, a QP-sized
vector) and the end-to-end linearization of the CIGRE-like system, which
is run in a subprocess per backend because the backend is picked at import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mgdispatch import _kernels as K
from mgdispatch.fixtures import cigre_lv, cigre_mv
from mgdispatch.network import build_admittance

E2E = """
import time
from mgdispatch import fixtures, problems
mv, lvs, sc = fixtures.cigre_system()
problems.linearize_system(mv, lvs, sc.subset(horizon=1))
t = time.perf_counter()
problems.linearize_system(mv, lvs, sc)
print(time.perf_counter() - t)
"""


def _best(fn, repeat, number):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for model in (cigre_mv(), cigre_lv("lv", 5)):
        y = build_admittance(model)
        s = -0.02 * (1 + rng.random(model.n_pq)) * (1 + 0.3j)
        if model.base_power < 1e6:
            s *= 10
        args = (y, s, 1.0 + 0j, 1e-10, 30)
        a = _best(lambda: K.newton_pf_numpy(*args), repeat, 50)
        b = _best(lambda: K.newton_pf_numba(*args), repeat, 50)
        va, vb = K.newton_pf_numpy(*args)[0], K.newton_pf_numba(*args)[0]
        rows.append((f"newton_pf ({model.n_buses} buses)", a, b, float(np.max(np.abs(va - vb)))))
    m = 80_000
    z_t, z, yv = rng.standard_normal((3, m))
    rho = np.full(m, 0.1)
    lo, hi = -np.ones(m), np.ones(m)
    di, dj = np.arange(0, 2000, 2), np.arange(1, 2000, 2)
    rad = np.full(di.size, 0.5)
    args = (z_t, z, yv, rho, 1.6, lo, hi, di, dj, rad)
    a = _best(lambda: K.admm_update_numpy(*args), repeat, 20)
    b = _best(lambda: K.admm_update_numba(*args), repeat, 20)
    diff = float(np.max(np.abs(K.admm_update_numpy(*args)[0] - K.admm_update_numba(*args)[0])))
    rows.append((f"admm_update (m={m})", a, b, diff))
    a = _best(lambda: K.inf_norm_numpy(z), repeat, 200)
    b = _best(lambda: K.inf_norm_numba(z), repeat, 200)
    rows.append((f"inf_norm (m={m})", a, b, abs(K.inf_norm_numpy(z) - K.inf_norm_numba(z))))
    return rows


def e2e(flag):
    env = dict(os.environ, MGDISPATCH_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    print(f"{'kernel':32s} {'numpy':>12s} {'numba':>12s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, a, b, diff in kernel_rows(args.repeat):
        print(f"{name:32s} {a * 1e6:10.1f}us {b * 1e6:10.1f}us {a / b:7.1f}x {diff:11.2e}")
    if not args.skip_e2e:
        a, b = e2e("0"), e2e("1")
        print(f"{'linearize CIGRE (7x96)':32s} {a:11.2f}s {b:11.2f}s {a / b:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
