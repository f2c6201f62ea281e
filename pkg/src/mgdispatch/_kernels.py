"""Hot loops: the Newton-Raphson power flow (run once per grid, scenario and
step while linearizing) and the inner iteration of the operator-splitting
QP solver.

Each kernel has a numba implementation and a pure-numpy twin. The numba
path is used when numba imports and ``MGDISPATCH_NUMBA`` is not ``0``.
The splitting kernels are element-wise and agree to the last bit; the
power flow twins agree to round-off (different summation order).
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MGDISPATCH_NUMBA", "1") != "0"


# --- pure numpy ---------------------------------------------------------------

def project_numpy(v, lower, upper, disk_i, disk_j, radius):
    out = np.minimum(np.maximum(v, lower), upper)
    if disk_i.size:
        a = v[disk_i]
        b = v[disk_j]
        nrm = np.sqrt(a * a + b * b)
        scale = np.where(nrm > radius, radius / np.where(nrm > 0, nrm, 1.0), 1.0)
        out[disk_i] = a * scale
        out[disk_j] = b * scale
    return out


def admm_update_numpy(z_tilde, z, y, rho, alpha, lower, upper, disk_i, disk_j, radius):
    """Relaxed z/y update; returns the new ``(z, y)``."""
    z_hat = alpha * z_tilde + (1.0 - alpha) * z
    z_new = project_numpy(z_hat + y / rho, lower, upper, disk_i, disk_j, radius)
    y_new = y + rho * (z_hat - z_new)
    return z_new, y_new


def inf_norm_numpy(v):
    return float(np.max(np.abs(v))) if v.size else 0.0


def _jacobian_numpy(y, v):
    i_bus = y @ v
    v_norm = v / np.abs(v)
    ds_dvm = np.diag(v) @ np.conj(y @ np.diag(v_norm)) + np.diag(np.conj(i_bus) * v_norm)
    ds_dva = 1j * np.diag(v) @ np.conj(np.diag(i_bus) - y @ np.diag(v))
    pq = slice(1, None)
    return np.block([
        [ds_dva[pq, pq].real, ds_dvm[pq, pq].real],
        [ds_dva[pq, pq].imag, ds_dvm[pq, pq].imag],
    ])


def newton_pf_numpy(y, s_spec, v0, tol, max_iter):
    """Polar Newton-Raphson from a flat start at slack voltage ``v0``.

    Returns ``(v, iterations, mismatch, status)`` with status 0 converged,
    1 iteration limit, 2 diverged (non-finite or non-positive magnitude).
    """
    nb = y.shape[0]
    n = nb - 1
    vm = np.full(nb, abs(v0))
    va = np.full(nb, np.angle(v0))
    mismatch = np.inf
    for it in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        f = (v * np.conj(y @ v))[1:] - s_spec
        rhs = np.concatenate([f.real, f.imag])
        mismatch = float(np.max(np.abs(rhs)))
        if mismatch <= tol:
            return v, it, mismatch, 0
        if it == max_iter:
            return v, it, mismatch, 1
        dx = np.linalg.solve(_jacobian_numpy(y, v), -rhs)
        va[1:] += dx[:n]
        vm[1:] += dx[n:]
        if not np.all(np.isfinite(vm)) or np.any(vm <= 0):
            return v, it + 1, mismatch, 2
    return v, max_iter, mismatch, 1  # pragma: no cover


# --- numba ----------------------------------------------------------------------

if HAVE_NUMBA:
    @njit(cache=True)
    def _project_nb(v, lower, upper, disk_i, disk_j, radius, out):
        for k in range(v.size):
            x = v[k]
            if x < lower[k]:
                x = lower[k]
            if x > upper[k]:
                x = upper[k]
            out[k] = x
        for d in range(disk_i.size):
            i = disk_i[d]
            j = disk_j[d]
            a = v[i]
            b = v[j]
            nrm = np.sqrt(a * a + b * b)
            if nrm > radius[d]:
                s = radius[d] / nrm
                out[i] = a * s
                out[j] = b * s
            else:
                out[i] = a
                out[j] = b

    @njit(cache=True)
    def _admm_update_nb(z_tilde, z, y, rho, alpha, lower, upper, disk_i, disk_j, radius):
        m = z.size
        z_hat = np.empty(m)
        w = np.empty(m)
        for k in range(m):
            z_hat[k] = alpha * z_tilde[k] + (1.0 - alpha) * z[k]
            w[k] = z_hat[k] + y[k] / rho[k]
        z_new = np.empty(m)
        _project_nb(w, lower, upper, disk_i, disk_j, radius, z_new)
        y_new = np.empty(m)
        for k in range(m):
            y_new[k] = y[k] + rho[k] * (z_hat[k] - z_new[k])
        return z_new, y_new

    @njit(cache=True)
    def _inf_norm_nb(v):
        best = 0.0
        for k in range(v.size):
            a = abs(v[k])
            if a > best:
                best = a
        return best

    @njit(cache=True)
    def _newton_pf_nb(y, s_spec, v0, tol, max_iter):
        nb = y.shape[0]
        n = nb - 1
        vm = np.full(nb, abs(v0))
        va = np.full(nb, np.angle(v0))
        v = np.empty(nb, dtype=np.complex128)
        i_bus = np.empty(nb, dtype=np.complex128)
        jac = np.empty((2 * n, 2 * n))
        rhs = np.empty(2 * n)
        mismatch = np.inf
        for it in range(max_iter + 1):
            for i in range(nb):
                v[i] = vm[i] * np.exp(1j * va[i])
            for i in range(nb):
                acc = 0j
                for k in range(nb):
                    acc += y[i, k] * v[k]
                i_bus[i] = acc
            mismatch = 0.0
            for i in range(n):
                f = v[i + 1] * np.conj(i_bus[i + 1]) - s_spec[i]
                rhs[i] = -f.real
                rhs[n + i] = -f.imag
                mismatch = max(mismatch, abs(f.real), abs(f.imag))
            if mismatch <= tol:
                return v, it, mismatch, 0
            if it == max_iter:
                return v, it, mismatch, 1
            for a in range(n):
                i = a + 1
                for b in range(n):
                    k = b + 1
                    vn = v[k] / abs(v[k])
                    dva = 1j * v[i] * np.conj(-y[i, k] * v[k])
                    dvm = v[i] * np.conj(y[i, k] * vn)
                    if i == k:
                        dva += 1j * v[i] * np.conj(i_bus[i])
                        dvm += np.conj(i_bus[i]) * vn
                    jac[a, b] = dva.real
                    jac[n + a, b] = dva.imag
                    jac[a, n + b] = dvm.real
                    jac[n + a, n + b] = dvm.imag
            dx = np.linalg.solve(jac, rhs)
            bad = False
            for a in range(n):
                va[a + 1] += dx[a]
                vm[a + 1] += dx[n + a]
                if not np.isfinite(vm[a + 1]) or vm[a + 1] <= 0:
                    bad = True
            if bad:
                return v, it + 1, mismatch, 2
        return v, max_iter, mismatch, 1

    def newton_pf_numba(y, s_spec, v0, tol, max_iter):
        v, it, mis, status = _newton_pf_nb(np.ascontiguousarray(y, dtype=np.complex128),
                                           np.ascontiguousarray(s_spec, dtype=np.complex128),
                                           complex(v0), float(tol), int(max_iter))
        return v.copy(), int(it), float(mis), int(status)

    def project_numba(v, lower, upper, disk_i, disk_j, radius):
        out = np.empty_like(v)
        _project_nb(v, lower, upper, disk_i, disk_j, radius, out)
        return out

    def admm_update_numba(z_tilde, z, y, rho, alpha, lower, upper, disk_i, disk_j, radius):
        return _admm_update_nb(z_tilde, z, y, rho, float(alpha), lower, upper, disk_i, disk_j, radius)

    def inf_norm_numba(v):
        return float(_inf_norm_nb(v))
else:  # pragma: no cover
    project_numba = project_numpy
    admm_update_numba = admm_update_numpy
    inf_norm_numba = inf_norm_numpy
    newton_pf_numba = newton_pf_numpy


if USE_NUMBA:
    project = project_numba
    admm_update = admm_update_numba
    newton_pf = newton_pf_numba
else:
    project = project_numpy
    admm_update = admm_update_numpy
    newton_pf = newton_pf_numpy
# numpy's vectorized reduction beats the compiled loop (see benchmarks/)
inf_norm = inf_norm_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
