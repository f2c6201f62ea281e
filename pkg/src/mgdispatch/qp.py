"""Convex QP intermediate representation and an operator-splitting solver.

Problem form::

    minimize    0.5 x'Px + q'x + constant
    subject to  l <= A x <= u
                lb <= x <= ub
                ||(A_i x, A_j x)|| <= r   for every disk (i, j, r)

Disk rows carry infinite box bounds; the disk is their only constraint.
Every problem in the package is assembled through :class:`QpBuilder`,
which keeps a name table from named blocks to column/row indices.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from . import _kernels as K

try:
    import clarabel
    _HAVE_CLARABEL = True
except ImportError:  # pragma: no cover
    _HAVE_CLARABEL = False

INF = np.inf


@dataclass(frozen=True, eq=False)
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csr_matrix
    l: np.ndarray
    u: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    disk_rows: np.ndarray
    disk_radius: np.ndarray
    constant: float = 0.0
    var_blocks: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    row_blocks: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    disk_blocks: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.l.size

    def objective(self, x) -> float:
        x = np.asarray(x, float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.constant)

    def cols(self, name) -> np.ndarray:
        return self.var_blocks[name]

    def rows(self, name) -> np.ndarray:
        return self.row_blocks[name]

    def value(self, x, name) -> np.ndarray:
        return np.asarray(x)[self.var_blocks[name]]

    def with_linear(self, q=None, constant=None) -> "QpProblem":
        """Copy with a new linear term; matrices are shared."""
        return QpProblem(self.P, self.q if q is None else np.asarray(q, float), self.A, self.l, self.u,
                         self.lb, self.ub, self.disk_rows, self.disk_radius,
                         self.constant if constant is None else float(constant),
                         self.var_blocks, self.row_blocks, self.disk_blocks)

    def column_name(self, j: int) -> str:
        for name, idx in self.var_blocks.items():
            hit = np.argwhere(idx == j)
            if hit.size:
                return f"{name}{hit[0].tolist() if idx.ndim else ''}"
        return f"x[{j}]"

    def row_name(self, i: int) -> str:
        for name, idx in self.row_blocks.items():
            hit = np.argwhere(idx == i)
            if hit.size:
                return f"{name}{hit[0].tolist() if idx.ndim else ''}"
        return f"row[{i}]"

    def max_violation(self, x) -> float:
        x = np.asarray(x, float)
        ax = self.A @ x
        viol = 0.0
        if ax.size:
            viol = max(viol, float(np.max(np.maximum(self.l - ax, 0.0))), float(np.max(np.maximum(ax - self.u, 0.0))))
        if x.size:
            viol = max(viol, float(np.max(np.maximum(self.lb - x, 0.0))), float(np.max(np.maximum(x - self.ub, 0.0))))
        if self.disk_radius.size:
            nrm = np.hypot(ax[self.disk_rows[:, 0]], ax[self.disk_rows[:, 1]])
            viol = max(viol, float(np.max(np.maximum(nrm - self.disk_radius, 0.0))))
        return viol


class QpBuilder:
    """Incremental assembly of a :class:`QpProblem` from named blocks."""

    def __init__(self):
        self._n = 0
        self._lb, self._ub = [], []
        self._vars = {}
        self._m = 0
        self._rows = {}
        self._a_r, self._a_c, self._a_v = [], [], []
        self._l, self._u = [], []
        self._p_r, self._p_c, self._p_v = [], [], []
        self._q_c, self._q_v = [], []
        self._const = 0.0
        self._disk_pairs, self._disk_rad = [], []
        self._disks = {}
        self._n_disks = 0

    @property
    def n(self) -> int:
        return self._n

    def __contains__(self, name) -> bool:
        return name in self._vars

    def __getitem__(self, name) -> np.ndarray:
        return self._vars[name]

    def add_var(self, name, shape, lb=-INF, ub=INF) -> np.ndarray:
        if name in self._vars:
            raise KeyError(f"variable block {name!r} already defined")
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        size = int(np.prod(shape)) if shape else 1
        idx = (self._n + np.arange(size)).reshape(shape)
        self._lb.append(np.broadcast_to(np.asarray(lb, float), shape).ravel())
        self._ub.append(np.broadcast_to(np.asarray(ub, float), shape).ravel())
        self._n += size
        self._vars[name] = idx
        return idx

    @staticmethod
    def _flatten_terms(shape, terms):
        size = int(np.prod(shape)) if shape else 1
        cols, coefs = [], []
        for c, v in terms:
            c = np.asarray(c)
            v = np.asarray(v, float)
            if c.ndim <= len(shape):
                c = np.broadcast_to(c, shape)[..., None]
                if 0 < v.ndim <= len(shape):
                    v = np.broadcast_to(v, shape)[..., None]
            else:
                c = np.broadcast_to(c, shape + c.shape[len(shape):])
            v = np.broadcast_to(v, c.shape)
            cols.append(c.reshape(size, -1))
            coefs.append(v.reshape(size, -1))
        if not cols:
            return np.zeros((size, 0), int), np.zeros((size, 0))
        return np.hstack(cols), np.hstack(coefs)

    def add_rows(self, name, shape, terms, lower=-INF, upper=INF) -> np.ndarray:
        """Rows ``lower <= sum(coef * x[cols]) <= upper`` elementwise over ``shape``.

        Each term is ``(cols, coefs)`` with ``cols`` of shape ``shape`` or
        ``shape + (k,)``; ``coefs`` broadcasts against ``cols``.
        """
        if name in self._rows:
            raise KeyError(f"row block {name!r} already defined")
        shape = tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        cols, coefs = self._flatten_terms(shape, terms)
        rows = self._m + np.arange(size)
        keep = coefs != 0.0
        self._a_r.append(np.broadcast_to(rows[:, None], cols.shape)[keep])
        self._a_c.append(cols[keep])
        self._a_v.append(coefs[keep])
        self._l.append(np.broadcast_to(np.asarray(lower, float), shape).ravel().copy())
        self._u.append(np.broadcast_to(np.asarray(upper, float), shape).ravel().copy())
        self._m += size
        idx = rows.reshape(shape)
        self._rows[name] = idx
        return idx

    def add_disk(self, name, p_cols, q_cols, radius, segments: int = 0) -> np.ndarray:
        """``p^2 + q^2 <= radius^2`` elementwise.

        With ``segments > 0`` the disk is replaced by an inscribed regular
        polygon of that many linear rows (for LP-only consumers); the
        return value is then the row index block.
        """
        p_cols = np.asarray(p_cols)
        shape = p_cols.shape
        if segments:
            ang = 2.0 * np.pi * np.arange(segments) / segments
            rad = np.broadcast_to(np.asarray(radius, float), shape)[..., None] * np.cos(np.pi / segments)
            tile = lambda c: np.broadcast_to(np.asarray(c)[..., None], shape + (segments,))
            return self.add_rows(name, shape + (segments,),
                                 [(tile(p_cols), np.cos(ang)), (tile(q_cols), np.sin(ang))], upper=rad)
        rp = self.add_rows(f"{name}:p", shape, [(p_cols, 1.0)])
        rq = self.add_rows(f"{name}:q", shape, [(np.asarray(q_cols), 1.0)])
        size = rp.size
        self._disk_pairs.append(np.stack([rp.ravel(), rq.ravel()], axis=1))
        self._disk_rad.append(np.broadcast_to(np.asarray(radius, float), shape).ravel().copy())
        idx = (self._n_disks + np.arange(size)).reshape(shape)
        self._n_disks += size
        self._disks[name] = idx
        return idx

    def add_square(self, weight, shape, terms, offset=0.0) -> None:
        """Add ``sum(weight * (sum(coef * x[cols]) + offset)**2)`` over ``shape``."""
        shape = tuple(shape)
        cols, coefs = self._flatten_terms(shape, terms)
        size = cols.shape[0]
        w = np.broadcast_to(np.asarray(weight, float), shape).ravel()
        off = np.broadcast_to(np.asarray(offset, float), shape).ravel()
        k = cols.shape[1]
        for a in range(k):
            for b in range(k):
                self._p_r.append(cols[:, a])
                self._p_c.append(cols[:, b])
                self._p_v.append(2.0 * w * coefs[:, a] * coefs[:, b])
            self._q_c.append(cols[:, a])
            self._q_v.append(2.0 * w * off * coefs[:, a])
        self._const += float(np.sum(w * off * off))
        del size

    def add_linear(self, cols, coefs) -> None:
        cols = np.asarray(cols).ravel()
        self._q_c.append(cols)
        self._q_v.append(np.broadcast_to(np.asarray(coefs, float), cols.shape).ravel())

    def add_constant(self, value: float) -> None:
        self._const += float(value)

    def build(self) -> QpProblem:
        n, m = self._n, self._m
        cat = lambda xs, dt=float: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
        P = sp.coo_matrix((cat(self._p_v), (cat(self._p_r, int), cat(self._p_c, int))), shape=(n, n)).tocsc()
        P.sum_duplicates()
        P.eliminate_zeros()
        q = np.zeros(n)
        np.add.at(q, cat(self._q_c, int), cat(self._q_v))
        A = sp.coo_matrix((cat(self._a_v), (cat(self._a_r, int), cat(self._a_c, int))), shape=(m, n)).tocsr()
        A.sum_duplicates()
        disk_rows = np.vstack(self._disk_pairs).astype(np.int64) if self._disk_pairs else np.zeros((0, 2), np.int64)
        return QpProblem(
            P=P, q=q, A=A, l=cat(self._l), u=cat(self._u), lb=cat(self._lb), ub=cat(self._ub),
            disk_rows=disk_rows, disk_radius=cat(self._disk_rad), constant=self._const,
            var_blocks=MappingProxyType(dict(self._vars)),
            row_blocks=MappingProxyType(dict(self._rows)),
            disk_blocks=MappingProxyType(dict(self._disks)),
        )


# --- validation and export ------------------------------------------------------

def _min_eigenvalues(P: sp.spmatrix):
    """Smallest eigenvalue of every connected block of P (exact, dense per block)."""
    n = P.shape[0]
    if n == 0:
        return []
    n_comp, labels = connected_components(abs(P) + sp.eye(n), directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_comp + 1))
    Pd = P.tocsr()
    out = []
    for c in range(n_comp):
        members = order[bounds[c]:bounds[c + 1]]
        block = Pd[members][:, members].toarray()
        if not np.any(block):
            continue
        out.append((members, float(np.linalg.eigvalsh(0.5 * (block + block.T))[0])))
    return out


def validate(problem: QpProblem, psd_tol: float = 1e-9) -> list[str]:
    """Structural diagnostics; an empty list means the problem is well formed."""
    diags = []
    n, m = problem.n, problem.m
    if problem.P.shape != (n, n):
        diags.append(f"cost matrix has shape {problem.P.shape}, expected ({n}, {n})")
    if problem.A.shape != (m, n):
        diags.append(f"constraint matrix has shape {problem.A.shape}, expected ({m}, {n})")
    for label, arr in (("q", problem.q), ("A", problem.A.data), ("P", problem.P.data)):
        if not np.all(np.isfinite(arr)):
            diags.append(f"non-finite entries in {label}")
    if problem.P.nnz and abs(problem.P - problem.P.T).max() > 1e-12 * max(1.0, abs(problem.P).max()):
        diags.append("cost matrix is not symmetric")
    for members, lam in _min_eigenvalues(problem.P):
        if lam < -psd_tol:
            diags.append(f"cost matrix is not PSD: eigenvalue {lam:.3e} on block containing "
                         f"{problem.column_name(int(members[0]))}")
    for i in np.nonzero(problem.l > problem.u)[0]:
        diags.append(f"row {problem.row_name(int(i))} has lower bound > upper bound")
    for j in np.nonzero(problem.lb > problem.ub)[0]:
        diags.append(f"variable {problem.column_name(int(j))} has lower bound > upper bound")
    for d in np.nonzero(problem.disk_radius < 0)[0]:
        diags.append(f"disk {d} has negative radius")
    if problem.disk_rows.size and (problem.disk_rows.min() < 0 or problem.disk_rows.max() >= m):
        diags.append("disk references a row that does not exist")
    used = np.zeros(n, bool)
    if problem.A.nnz:
        used[problem.A.indices] = True
    if problem.P.nnz:
        used[problem.P.indices] = True
    used |= problem.q != 0
    used |= np.isfinite(problem.lb) | np.isfinite(problem.ub)
    for j in np.nonzero(~used)[0]:
        diags.append(f"dangling column {problem.column_name(int(j))} (no cost, bounds or rows)")
    return diags


def export_triplets(problem: QpProblem, path) -> None:
    """Plain-text dump: one record per line, ``kind index [index] value``."""
    P = problem.P.tocoo()
    A = problem.A.tocoo()
    fmt = "{:.17g}".format
    with open(path, "w") as fh:
        fh.write(f"# qp n={problem.n} m={problem.m} disks={problem.disk_radius.size}\n")
        fh.write(f"c {fmt(problem.constant)}\n")
        for i, j, v in zip(P.row, P.col, P.data):
            fh.write(f"P {i} {j} {fmt(v)}\n")
        for j in np.nonzero(problem.q)[0]:
            fh.write(f"q {j} {fmt(problem.q[j])}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"A {i} {j} {fmt(v)}\n")
        for i in range(problem.m):
            fh.write(f"l {i} {fmt(problem.l[i])}\nu {i} {fmt(problem.u[i])}\n")
        for j in range(problem.n):
            fh.write(f"lb {j} {fmt(problem.lb[j])}\nub {j} {fmt(problem.ub[j])}\n")
        for d, ((i, j), r) in enumerate(zip(problem.disk_rows, problem.disk_radius)):
            fh.write(f"disk {d} {i} {j} {fmt(r)}\n")
        for name, idx in problem.var_blocks.items():
            fh.write(f"var {name} {' '.join(map(str, np.ravel(idx)))}\n")
        for name, idx in problem.row_blocks.items():
            fh.write(f"row {name} {' '.join(map(str, np.ravel(idx)))}\n")


def read_triplets(path) -> QpProblem:
    """Inverse of :func:`export_triplets` (name tables are flattened)."""
    n = m = 0
    const = 0.0
    Pt, At, qd = [], [], {}
    l, u, lb, ub = {}, {}, {}, {}
    disks, rad = [], []
    vb, rb = {}, {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            kind = parts[0]
            if kind == "#":
                kv = dict(p.split("=") for p in parts[2:])
                n, m = int(kv["n"]), int(kv["m"])
            elif kind == "c":
                const = float(parts[1])
            elif kind in ("P", "A"):
                (Pt if kind == "P" else At).append((int(parts[1]), int(parts[2]), float(parts[3])))
            elif kind in ("q", "l", "u", "lb", "ub"):
                {"q": qd, "l": l, "u": u, "lb": lb, "ub": ub}[kind][int(parts[1])] = float(parts[2])
            elif kind == "disk":
                disks.append((int(parts[2]), int(parts[3])))
                rad.append(float(parts[4]))
            elif kind in ("var", "row"):
                (vb if kind == "var" else rb)[parts[1]] = np.array([int(x) for x in parts[2:]], int)

    def mat(trips, shape):
        if not trips:
            return sp.csr_matrix(shape)
        r, c, v = zip(*trips)
        return sp.coo_matrix((v, (r, c)), shape=shape)

    vec = lambda d, size, default: np.array([d.get(i, default) for i in range(size)], float)
    return QpProblem(
        P=mat(Pt, (n, n)).tocsc(), q=vec(qd, n, 0.0), A=mat(At, (m, n)).tocsr(),
        l=vec(l, m, -INF), u=vec(u, m, INF), lb=vec(lb, n, -INF), ub=vec(ub, n, INF),
        disk_rows=np.array(disks, np.int64).reshape(-1, 2), disk_radius=np.array(rad, float),
        constant=const, var_blocks=MappingProxyType(vb), row_blocks=MappingProxyType(rb),
    )


# --- solver -----------------------------------------------------------------------

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
MAX_ITER = "MaxIter"

RHO_MIN, RHO_MAX = 1e-6, 1e6
RHO_EQ_SCALE = 1e3


@dataclass(frozen=True)
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_pinf: float = 1e-7
    max_iter: int = 50_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    check_every: int = 5
    scaling_iter: int = 10
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine_iter: int = 5
    polish_max_rounds: int = 25
    # "splitting" (the solver in this module) or "clarabel" (interior point);
    # empty means $MGDISPATCH_QP_BACKEND, else clarabel when importable
    backend: str = ""
    ipm_tol: float = 1e-11
    ipm_max_iter: int = 200
    # one retry at this tolerance when the tight solve stalls near machine precision
    ipm_fallback_tol: float = 1e-9


def resolve_backend(settings: "QpSettings | None" = None) -> str:
    name = (settings.backend if settings else "") or os.environ.get("MGDISPATCH_QP_BACKEND", "")
    if not name:
        name = "clarabel" if _HAVE_CLARABEL else "splitting"
    if name not in ("splitting", "clarabel"):
        raise ValueError(f"unknown QP backend {name!r}")
    if name == "clarabel" and not _HAVE_CLARABEL:
        raise ValueError("clarabel backend requested but clarabel is not installed")
    return name


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    y_bounds: np.ndarray
    objective: float
    status: str
    iterations: int
    max_violation: float
    prim_res: float = np.nan
    dual_res: float = np.nan
    polished: bool = False
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _same_sparse(a, b, values=True) -> bool:
    return a.shape == b.shape and a.nnz == b.nnz and np.array_equal(a.indptr, b.indptr) \
        and np.array_equal(a.indices, b.indices) and (not values or np.array_equal(a.data, b.data))


def same_structure(p0: QpProblem, prob: QpProblem, same_p_values: bool = True) -> bool:
    """True when ``prob`` differs from ``p0`` only in vectors (q, bounds, radii)
    and, with ``same_p_values=False``, in the values of P."""
    if prob is p0:
        return True
    if prob.n != p0.n or prob.m != p0.m or not np.array_equal(prob.disk_rows, p0.disk_rows):
        return False
    fin = lambda p: (np.isfinite(p.l), np.isfinite(p.u), np.isfinite(p.lb), np.isfinite(p.ub), p.l == p.u)
    if not all(np.array_equal(a, b) for a, b in zip(fin(prob), fin(p0))):
        return False
    return _same_sparse(prob.A, p0.A) and _same_sparse(prob.P, p0.P, values=same_p_values)


class QpSolver:
    """Operator-splitting (ADMM) QP solver with Ruiz scaling and polishing.

    A solver instance caches the scaled data and the factorization, so
    re-solving with a new linear term or new bounds (same matrices) is
    cheap and warm-starts from the previous iterate.
    """

    def __init__(self, problem: QpProblem, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self.problem = problem
        self._setup(problem)

    # setup ---------------------------------------------------------------------
    def _setup(self, prob: QpProblem):
        t0 = time.perf_counter()
        n, m = prob.n, prob.m
        bounded = np.nonzero(np.isfinite(prob.lb) | np.isfinite(prob.ub))[0]
        self._bounded = bounded
        A_full = sp.vstack([prob.A, sp.csr_matrix((np.ones(bounded.size), (np.arange(bounded.size), bounded)),
                                                 shape=(bounded.size, n))]).tocsr()
        self._m_full = m + bounded.size
        di = prob.disk_rows[:, 0].astype(np.int64).copy()
        dj = prob.disk_rows[:, 1].astype(np.int64).copy()
        self._di, self._dj = di, dj
        P = prob.P.tocsc()
        D, E, c = self._ruiz(P, A_full, prob.q)
        self._D, self._E, self._c = D, E, c
        self._Dinv, self._Einv = 1.0 / D, 1.0 / E
        self._Ps = (c * sp.diags(D) @ P @ sp.diags(D)).tocsc()
        self._As = (sp.diags(E) @ A_full @ sp.diags(D)).tocsr()
        self._AsT = self._As.T.tocsr()
        self._set_vectors(prob)
        self._rho = self.settings.rho
        self._rho_vec = self._make_rho_vec(self._rho)
        self._factor()
        self._x = np.zeros(n)
        self._z = np.zeros(self._m_full)
        self._y = np.zeros(self._m_full)
        self._has_iterate = False
        self.setup_time = time.perf_counter() - t0

    def _ruiz(self, P, A, q):
        n, m = P.shape[0], A.shape[0]
        D, E, c = np.ones(n), np.ones(m), 1.0
        Pw, Aw, qw = P.copy().tocsc(), A.copy().tocsc(), q.copy()
        pair_i, pair_j = self._di, self._dj
        for _ in range(self.settings.scaling_iter):
            col_p = abs(Pw).max(axis=0).toarray().ravel() if Pw.nnz else np.zeros(n)
            col_a = abs(Aw).max(axis=0).toarray().ravel() if Aw.nnz else np.zeros(n)
            colnorm = np.maximum(col_p, col_a)
            rownorm = abs(Aw).max(axis=1).toarray().ravel() if Aw.nnz else np.zeros(m)
            dD = 1.0 / np.sqrt(np.where(colnorm < 1e-4, 1.0, colnorm))
            dE = 1.0 / np.sqrt(np.where(rownorm < 1e-4, 1.0, rownorm))
            dD = np.clip(dD, 1e-4, 1e4)
            dE = np.clip(dE, 1e-4, 1e4)
            if pair_i.size:
                g = np.sqrt(dE[pair_i] * dE[pair_j])
                dE[pair_i] = g
                dE[pair_j] = g
            Pw = (sp.diags(dD) @ Pw @ sp.diags(dD)).tocsc()
            Aw = (sp.diags(dE) @ Aw @ sp.diags(dD)).tocsc()
            qw = dD * qw
            D *= dD
            E *= dE
            col_p = abs(Pw).max(axis=0).toarray().ravel() if Pw.nnz else np.zeros(n)
            mean_p = float(np.mean(col_p)) if n else 0.0
            qn = float(np.max(np.abs(qw))) if n else 0.0
            gamma = 1.0 / max(mean_p, qn, 1e-4)
            gamma = min(max(gamma, 1e-4), 1e4)
            Pw = gamma * Pw
            qw = gamma * qw
            c *= gamma
        return D, E, c

    def _set_vectors(self, prob: QpProblem):
        b = self._bounded
        l_full = np.concatenate([prob.l, prob.lb[b]])
        u_full = np.concatenate([prob.u, prob.ub[b]])
        self._qs = self._c * self._D * prob.q
        self._ls = np.where(np.isfinite(l_full), self._E * l_full, -INF)
        self._us = np.where(np.isfinite(u_full), self._E * u_full, INF)
        self._rs = self._E[self._di] * prob.disk_radius if self._di.size else np.zeros(0)
        self._eq = np.isfinite(self._ls) & (self._ls == self._us)
        in_disk = np.zeros(self._m_full, bool)
        in_disk[self._di] = True
        in_disk[self._dj] = True
        self._free = ~in_disk & ~np.isfinite(self._ls) & ~np.isfinite(self._us)
        self._l_full, self._u_full = l_full, u_full

    def _make_rho_vec(self, rho):
        vec = np.full(self._m_full, rho)
        vec[self._eq] = RHO_EQ_SCALE * rho
        vec[self._free] = RHO_MIN
        return vec

    def _factor(self):
        n = self._Ps.shape[0]
        Kmat = self._Ps + self.settings.sigma * sp.eye(n, format="csc") + \
            (self._AsT @ sp.diags(self._rho_vec) @ self._As).tocsc()
        self._lu = spla.splu(Kmat.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)

    def matches(self, prob: QpProblem) -> bool:
        return same_structure(self.problem, prob, same_p_values=True)

    def update(self, prob: QpProblem):
        """Swap in a problem with identical matrices (vectors may differ)."""
        if not self.matches(prob):
            raise ValueError("problem structure differs; build a new solver")
        self.problem = prob
        self._set_vectors(prob)

    # iteration -----------------------------------------------------------------
    def _residuals(self, x, z, y):
        Ax = self._As @ x
        Px = self._Ps @ x
        Aty = self._AsT @ y
        prim = K.inf_norm(self._Einv * (Ax - z))
        dual = K.inf_norm(self._Dinv * (Px + self._qs + Aty)) / self._c
        prim_scale = max(K.inf_norm(self._Einv * Ax), K.inf_norm(self._Einv * z))
        dual_scale = max(K.inf_norm(self._Dinv * Px), K.inf_norm(self._Dinv * Aty),
                         K.inf_norm(self._Dinv * self._qs)) / self._c
        # scaled-space quantities drive the rho update
        sp_prim = K.inf_norm(Ax - z) / max(K.inf_norm(Ax), K.inf_norm(z), 1e-10)
        sp_dual = K.inf_norm(Px + self._qs + Aty) / max(K.inf_norm(Px), K.inf_norm(Aty), K.inf_norm(self._qs), 1e-10)
        return prim, dual, prim_scale, dual_scale, sp_prim, sp_dual

    def _project(self, v):
        return K.project(v, self._ls, self._us, self._di, self._dj, self._rs)

    def _primal_infeasible(self, dy):
        s = self.settings
        dy_u = self._E * dy
        nrm = K.inf_norm(dy_u)
        if nrm <= 1e-12:
            return False
        if K.inf_norm(self._Dinv * (self._AsT @ dy)) > s.eps_pinf * nrm:
            return False
        tol = 1e-9 * nrm
        pos = np.where(dy_u > tol, dy_u, 0.0)
        neg = np.where(dy_u < -tol, dy_u, 0.0)
        in_disk = np.zeros(dy.size, bool)
        in_disk[self._di] = True
        in_disk[self._dj] = True
        box = ~in_disk
        if np.any(box & (pos > 0) & ~np.isfinite(self._u_full)) or np.any(box & (neg < 0) & ~np.isfinite(self._l_full)):
            return False
        hi = np.where(box & (pos > 0), self._u_full, 0.0)
        lo = np.where(box & (neg < 0), self._l_full, 0.0)
        support = float(np.sum(hi * pos) + np.sum(lo * neg))
        if self._di.size:
            support += float(np.sum(self.problem.disk_radius * np.hypot(dy_u[self._di], dy_u[self._dj])))
        return support < -s.eps_pinf * nrm

    def solve(self, warm_start=None, warm_dual=None) -> QpSolution:
        s = self.settings
        t0 = time.perf_counter()
        if warm_start is not None:
            self._x = self._Dinv * np.asarray(warm_start, float)
            self._z = self._project(self._As @ self._x)
            self._y = np.zeros(self._m_full) if warm_dual is None else self._c * self._Einv * np.asarray(warm_dual, float)
        elif not self._has_iterate:
            self._x = np.zeros(self.problem.n)
            self._z = self._project(np.zeros(self._m_full))
            self._y = np.zeros(self._m_full)
        x, z, y = self._x, self._z, self._y
        alpha, sigma = s.alpha, s.sigma
        status = MAX_ITER
        y_check = y.copy()
        cert = None
        res = self._residuals(x, z, y)
        it = 0
        for it in range(1, s.max_iter + 1):
            rhs = sigma * x - self._qs + self._AsT @ (self._rho_vec * z - y)
            xt = self._lu.solve(rhs)
            zt = self._As @ xt
            x = alpha * xt + (1.0 - alpha) * x
            z, y = K.admm_update(zt, z, y, self._rho_vec, alpha, self._ls, self._us, self._di, self._dj, self._rs)
            if it % s.check_every == 0 or it == s.max_iter:
                res = self._residuals(x, z, y)
                prim, dual, ps, ds = res[:4]
                if prim <= s.eps_abs + s.eps_rel * ps and dual <= s.eps_abs + s.eps_rel * ds:
                    status = OPTIMAL
                    break
                if self._primal_infeasible(y - y_check):
                    status = INFEASIBLE
                    cert = self._E * (y - y_check) / self._c
                    break
                y_check = y.copy()
                if s.adaptive_rho and it % s.adaptive_rho_interval == 0:
                    ratio = np.sqrt(res[4] / max(res[5], 1e-12))
                    new_rho = float(np.clip(self._rho * ratio, RHO_MIN, RHO_MAX))
                    if new_rho > s.adaptive_rho_tolerance * self._rho or new_rho < self._rho / s.adaptive_rho_tolerance:
                        self._rho = new_rho
                        self._rho_vec = self._make_rho_vec(new_rho)
                        self._factor()
        self._x, self._z, self._y = x, z, y
        self._has_iterate = True
        prim, dual = res[0], res[1]
        polished = False
        if s.polish and status != INFEASIBLE:
            pol = self._polish(x, z, y, prim, dual)
            if pol is not None:
                x, z, y, prim, dual = pol
                polished = True
                ps, ds = self._residuals(x, z, y)[2:4]
                if prim <= s.eps_abs + s.eps_rel * ps and dual <= s.eps_abs + s.eps_rel * ds:
                    status = OPTIMAL
        sol = self._package(x, y, status, it, prim, dual, polished, time.perf_counter() - t0)
        if cert is not None:
            # Farkas direction over [A; I_bounded]: A'y ~ 0 with negative support
            sol.info["certificate"] = cert / max(K.inf_norm(cert), 1e-300)
        return sol

    def _polish(self, x, z, y, prim_admm, dual_admm):
        """Primal-dual active-set refinement started from the ADMM guess.

        Each round solves the equality-constrained QP on the current active
        set (active disks linearized at the current point, with their
        curvature added to the Hessian), then drops constraints whose
        multipliers have the wrong sign and adds violated ones.
        """
        s = self.settings
        n = x.size
        ls, us = self._ls, self._us
        As = self._As
        in_disk = np.zeros(self._m_full, bool)
        in_disk[self._di] = True
        in_disk[self._dj] = True
        box = ~in_disk
        state = np.zeros(self._m_full, np.int8)
        state[box & (self._eq | ((z - ls) < -y))] = -1
        state[box & (state == 0) & ((us - z) < y)] = 1
        n_d = self._di.size
        w = np.stack([z[self._di], z[self._dj]], axis=1) if n_d else np.zeros((0, 2))
        lam = np.zeros(n_d)
        d_act = np.zeros(n_d, bool)
        if n_d:
            yn = np.hypot(y[self._di], y[self._dj])
            wn = np.hypot(w[:, 0], w[:, 1])
            d_act = (yn > 0) & (wn > 0) & ((self._rs - wn) < yn)
            lam = np.where(d_act, yn, 0.0)
        Einv = self._Einv
        for _ in range(s.polish_max_rounds):
            low_idx = np.nonzero(state == -1)[0]
            up_idx = np.nonzero(state == 1)[0]
            d_idx = np.nonzero(d_act)[0]
            rows = [As[low_idx], As[up_idx]]
            rhs_b = [ls[low_idx], us[up_idx]]
            P = self._Ps
            if d_idx.size:
                wn = np.hypot(w[d_idx, 0], w[d_idx, 1])
                nv = w[d_idx] / np.where(wn > 0, wn, 1.0)[:, None]
                Ai, Aj = As[self._di[d_idx]], As[self._dj[d_idx]]
                rows.append(sp.diags(nv[:, 0]) @ Ai + sp.diags(nv[:, 1]) @ Aj)
                rhs_b.append(self._rs[d_idx])
                tan = sp.diags(-nv[:, 1]) @ Ai + sp.diags(nv[:, 0]) @ Aj
                curv = np.maximum(lam[d_idx], 0.0) / np.maximum(self._rs[d_idx], 1e-12)
                P = (P + tan.T @ sp.diags(curv) @ tan).tocsc()
            Aact = sp.vstack(rows).tocsc()
            b = np.concatenate(rhs_b)
            if Aact.shape[0] > n or not np.all(np.isfinite(b)):
                return None
            sol = self._kkt_solve(P, Aact, b)
            if sol is None:
                return None
            xp, ya = sol[:n], sol[n:]
            n_low, n_up = low_idx.size, up_idx.size
            y_low, y_up, y_d = ya[:n_low], ya[n_low:n_low + n_up], ya[n_low + n_up:]
            tol = 1e-9 * max(1.0, K.inf_norm(ya)) if ya.size else 0.0
            changed = False
            bad = (y_low > tol) & ~self._eq[low_idx]
            if bad.any():
                state[low_idx[bad]] = 0
                changed = True
            bad = y_up < -tol
            if bad.any():
                state[up_idx[bad]] = 0
                changed = True
            Ax = As @ xp
            vtol = 1e-10
            free = state == 0
            add_low = box & free & (Einv * (ls - Ax) > vtol)
            add_up = box & free & (Einv * (Ax - us) > vtol)
            if add_low.any() or add_up.any():
                state[add_low] = -1
                state[add_up] = 1
                changed = True
            if n_d:
                w_new = np.stack([Ax[self._di], Ax[self._dj]], axis=1)
                wn_new = np.hypot(w_new[:, 0], w_new[:, 1])
                lam_new = np.zeros(n_d)
                lam_new[d_idx] = y_d
                drop = d_act & (lam_new < -tol)
                add = ~d_act & (Einv[self._di] * (wn_new - self._rs) > vtol)
                if drop.any() or add.any():
                    d_act = (d_act & ~drop) | add
                    changed = True
                w = np.where(wn_new[:, None] > 0, w_new, w)
                lam = np.where(add, np.maximum(lam, 0.0), np.maximum(lam_new, 0.0))
            if changed:
                continue
            yp = np.zeros(self._m_full)
            yp[low_idx] = y_low
            yp[up_idx] = y_up
            if d_idx.size:
                nv = w[d_idx] / np.maximum(np.hypot(w[d_idx, 0], w[d_idx, 1]), 1e-300)[:, None]
                yp[self._di[d_idx]] = y_d * nv[:, 0]
                yp[self._dj[d_idx]] = y_d * nv[:, 1]
            zp_ = self._project(Ax)
            prim, dual, ps, ds = self._residuals(xp, zp_, yp)[:4]
            disk_gap = 0.0
            if d_idx.size:
                disk_gap = float(np.max(np.abs(Einv[self._di[d_idx]] * (np.hypot(Ax[self._di[d_idx]], Ax[self._dj[d_idx]])
                                                                       - self._rs[d_idx]))))
            if disk_gap > 1e-12:
                continue
            ok_p = prim <= max(s.eps_abs + s.eps_rel * ps, prim_admm)
            ok_d = dual <= max(s.eps_abs + s.eps_rel * ds, dual_admm)
            if ok_p and ok_d:
                return xp, zp_, yp, prim, dual
            return None
        return None

    def _kkt_solve(self, P, Aact, b):
        s = self.settings
        n, n_act = P.shape[0], Aact.shape[0]
        delta = s.polish_delta
        Kreg = sp.bmat([[P + delta * sp.eye(n), Aact.T], [Aact, -delta * sp.eye(n_act)]], format="csc")
        Kex = sp.bmat([[P, Aact.T], [Aact, None]], format="csc") if n_act else P.tocsc()
        rhs = np.concatenate([-self._qs, b])
        try:
            lu = spla.splu(Kreg, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)
        except RuntimeError:
            return None
        sol = lu.solve(rhs)
        for _ in range(s.polish_refine_iter):
            sol = sol + lu.solve(rhs - Kex @ sol)
        return sol if np.all(np.isfinite(sol)) else None

    def _package(self, xs, ys, status, it, prim, dual, polished, elapsed) -> QpSolution:
        prob = self.problem
        x = self._D * xs
        y_full = self._E * ys / self._c
        m = prob.m
        y_bounds = np.zeros(prob.n)
        y_bounds[self._bounded] = y_full[m:]
        return QpSolution(
            x=x, y=y_full[:m], y_bounds=y_bounds,
            objective=prob.objective(x), status=status, iterations=it,
            max_violation=prob.max_violation(x), prim_res=float(prim), dual_res=float(dual),
            polished=polished,
            info={"rho": self._rho, "solve_time": elapsed, "setup_time": self.setup_time, "backend": K.BACKEND},
        )


class ClarabelSolver:
    """Same interface as :class:`QpSolver`, backed by the Clarabel interior-point solver.

    Box rows become zero / nonnegative cones, each disk a 3-d second-order
    cone. Re-solves with new vectors (or new P values) update the solver in
    place instead of rebuilding it.
    """

    def __init__(self, problem: QpProblem, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self.problem = problem
        t0 = time.perf_counter()
        self._setup(problem)
        self.setup_time = time.perf_counter() - t0

    def _setup(self, prob: QpProblem):
        n, m = prob.n, prob.m
        bounded = np.nonzero(np.isfinite(prob.lb) | np.isfinite(prob.ub))[0]
        self._bounded = bounded
        A = sp.vstack([prob.A, sp.csr_matrix((np.ones(bounded.size), (np.arange(bounded.size), bounded)),
                                             shape=(bounded.size, n))]).tocsr()
        l_full, u_full = self._bounds(prob)
        in_disk = np.zeros(A.shape[0], bool)
        in_disk[prob.disk_rows.ravel()] = True
        eq = ~in_disk & np.isfinite(l_full) & (l_full == u_full)
        up = ~in_disk & ~eq & np.isfinite(u_full)
        lo = ~in_disk & ~eq & np.isfinite(l_full)
        self._eq, self._up, self._lo = np.nonzero(eq)[0], np.nonzero(up)[0], np.nonzero(lo)[0]
        k = prob.disk_rows.shape[0]
        sel = sp.csr_matrix((-np.ones(2 * k), (np.concatenate([3 * np.arange(k) + 1, 3 * np.arange(k) + 2]),
                                                np.concatenate([prob.disk_rows[:, 0], prob.disk_rows[:, 1]]))),
                            shape=(3 * k, A.shape[0]))
        G = sp.vstack([A[self._eq], A[self._up], -A[self._lo], sel @ A]).tocsc()
        self._cones = []
        if self._eq.size:
            self._cones.append(clarabel.ZeroConeT(int(self._eq.size)))
        if self._up.size + self._lo.size:
            self._cones.append(clarabel.NonnegativeConeT(int(self._up.size + self._lo.size)))
        self._cones += [clarabel.SecondOrderConeT(3)] * k
        self._m_full = A.shape[0]
        st = clarabel.DefaultSettings()
        st.verbose = False
        st.presolve_enable = False
        st.max_threads = 1
        st.tol_gap_abs = st.tol_gap_rel = st.tol_feas = self.settings.ipm_tol
        st.max_iter = self.settings.ipm_max_iter
        self._G = G
        self._solver = clarabel.DefaultSolver(sp.triu(prob.P, format="csc"), prob.q, G, self._h(prob), self._cones, st)

    def _retry(self, tol):
        st = self._solver.get_settings()
        tight = st.tol_gap_abs
        st.tol_gap_abs = st.tol_gap_rel = st.tol_feas = tol
        self._solver.update(settings=st)
        try:
            return self._solver.solve()
        finally:
            st.tol_gap_abs = st.tol_gap_rel = st.tol_feas = tight
            self._solver.update(settings=st)

    @staticmethod
    def _bounds(prob):
        b = np.nonzero(np.isfinite(prob.lb) | np.isfinite(prob.ub))[0]
        return np.concatenate([prob.l, prob.lb[b]]), np.concatenate([prob.u, prob.ub[b]])

    def _h(self, prob):
        l_full, u_full = self._bounds(prob)
        hd = np.zeros(3 * prob.disk_rows.shape[0])
        hd[0::3] = prob.disk_radius
        return np.concatenate([u_full[self._eq], u_full[self._up], -l_full[self._lo], hd])

    def matches(self, prob: QpProblem) -> bool:
        return same_structure(self.problem, prob, same_p_values=False)

    def update(self, prob: QpProblem):
        if not self.matches(prob):
            raise ValueError("problem structure differs; build a new solver")
        kw = {"q": prob.q, "b": self._h(prob)}
        if not _same_sparse(prob.P, self.problem.P):
            kw["P"] = sp.triu(prob.P, format="csc")
        self._solver.update(**kw)
        self.problem = prob

    def solve(self, warm_start=None, warm_dual=None) -> QpSolution:
        t0 = time.perf_counter()
        prob = self.problem
        res = self._solver.solve()
        raw = str(res.status)
        fallback = False
        if raw not in _IPM_ACCEPT + _IPM_INFEASIBLE and self.settings.ipm_fallback_tol > self.settings.ipm_tol:
            res = self._retry(self.settings.ipm_fallback_tol)
            raw, fallback = str(res.status), True
        x = np.array(res.x, float)
        z = np.array(res.z, float)
        n_eq, n_up = self._eq.size, self._up.size
        n_lo = self._lo.size
        y_full = np.zeros(self._m_full)
        y_full[self._eq] = z[:n_eq]
        y_full[self._up] += z[n_eq:n_eq + n_up]
        y_full[self._lo] -= z[n_eq + n_up:n_eq + n_up + n_lo]
        zd = z[n_eq + n_up + n_lo:].reshape(-1, 3)
        y_full[prob.disk_rows[:, 0]] = -zd[:, 1]
        y_full[prob.disk_rows[:, 1]] = -zd[:, 2]
        m = prob.m
        y_b = np.zeros(prob.n)
        y_b[self._bounded] = y_full[m:]
        info = {"solve_time": time.perf_counter() - t0, "setup_time": self.setup_time,
                "backend": "clarabel", "raw_status": raw, "fallback": fallback}
        if raw in _IPM_INFEASIBLE:
            info["certificate"] = y_full
            status = INFEASIBLE
        elif raw in _IPM_ACCEPT:
            status = OPTIMAL
        else:
            status = MAX_ITER
        if not np.all(np.isfinite(x)):
            x = np.zeros(prob.n)
        viol = prob.max_violation(x)
        dual = K.inf_norm(prob.P @ x + prob.q + prob.A.T @ y_full[:m] + y_b)
        if status == OPTIMAL and viol > 1e-6:
            status = MAX_ITER
        return QpSolution(x=x, y=y_full[:m], y_bounds=y_b, objective=prob.objective(x), status=status,
                          iterations=int(res.iterations), max_violation=viol, prim_res=viol, dual_res=dual,
                          polished=False, info=info)


_IPM_ACCEPT = ("Solved", "AlmostSolved")
_IPM_INFEASIBLE = ("PrimalInfeasible", "AlmostPrimalInfeasible")


def make_solver(problem: QpProblem, settings: QpSettings | None = None):
    if resolve_backend(settings) == "clarabel":
        return ClarabelSolver(problem, settings)
    return QpSolver(problem, settings)


def solve(problem: QpProblem, warm_start=None, settings: QpSettings | None = None, warm_dual=None) -> QpSolution:
    """One-shot solve with the configured backend (warm starts apply to the splitting backend)."""
    return make_solver(problem, settings).solve(warm_start=warm_start, warm_dual=warm_dual)


class QpCache:
    """Keeps one solver alive while successive problems share their matrices."""

    def __init__(self, settings: QpSettings | None = None):
        self.settings = settings
        self.solver = None
        self.rebuilds = 0

    def solve(self, problem: QpProblem, warm_start=None) -> QpSolution:
        if self.solver is not None and self.solver.matches(problem):
            self.solver.update(problem)
        else:
            self.solver = make_solver(problem, self.settings)
            self.rebuilds += 1
        return self.solver.solve(warm_start=warm_start)
