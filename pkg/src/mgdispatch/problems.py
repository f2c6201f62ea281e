"""Compile the dispatch problems into :class:`~mgdispatch.qp.QpProblem` instances.

Conventions used throughout:

* every array indexed by scenario and time has shape ``(n_scenarios, horizon)``;
* ``P0``/``Q0`` are the power imported by a grid at its slack bus (GCP for
  the MV grid, PCC for an LV grid), in that grid's per unit;
* coupling quantities (LV PCC flows, MV resource set-points) are exchanged
  in MV per unit; an LV grid's per unit is converted with
  ``scale = base_power_lv / base_power_mv``;
* the tracking deviation of every grid is measured in MV per unit and
  multiplied by the grid's ``tracking_weight``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, SchemaError, SolverFailure, ValidationError
from .linearization import MAX_SLACK_SHIFT, LinearGridModel, build_linear_model
from .network import NetworkModel, build_admittance, solve_ac_power_flow
from .qp import QpBuilder, QpProblem, QpSolution
from .resources import BessParams, grid_resources
from .scenarios import ScenarioSet

DEFAULT_NU = 1e-3


# --- linearized system -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridData:
    """One grid's linear models stacked over (scenario, time)."""

    model: NetworkModel
    resources: tuple
    a_v: np.ndarray  # (W, T, n_pq, 2 n_pq)
    b_v: np.ndarray  # (W, T, n_pq)
    a_i: np.ndarray  # (W, T, n_br, 2 n_pq)
    b_i: np.ndarray
    a_d: np.ndarray  # (W, T, 2, 2 n_pq)
    b_d: np.ndarray  # (W, T, 2)
    p_unc: np.ndarray  # (W, T) sum of uncontrollable injections
    q_unc: np.ndarray
    slack_ref: np.ndarray  # (W, T) slack voltage magnitude of the operating point
    scale: float = 1.0
    step_seconds: float = 900.0

    @property
    def name(self) -> str:
        return self.model.name

    @property
    def shape(self) -> tuple:
        return self.p_unc.shape

    @property
    def n_pq(self) -> int:
        return self.model.n_pq

    @property
    def weight(self) -> float:
        return self.model.tracking_weight * self.scale ** 2

    def linear_model(self, w: int, t: int) -> LinearGridModel:
        return LinearGridModel(self.a_v[w, t], self.b_v[w, t], self.a_i[w, t], self.b_i[w, t],
                               self.a_d[w, t], self.b_d[w, t], np.zeros(2 * self.n_pq),
                               float(self.slack_ref[w, t]), t, w)

    @classmethod
    def from_linear_models(cls, model, lins, p_unc, q_unc, resources=(), scale=1.0, step_seconds=900.0):
        """``lins[w][t]`` must hold one :class:`LinearGridModel` per scenario and step."""
        n_w, n_t = np.shape(p_unc)
        if len(lins) != n_w or any(len(row) != n_t for row in lins):
            raise DimensionMismatch(f"grid {model.name}: need {n_w}x{n_t} linear models")
        for w, row in enumerate(lins):
            for t, lin in enumerate(row):
                if lin is None:
                    raise DimensionMismatch(f"grid {model.name}: missing linear model for t={t}, scenario={w}")
                if lin.a_v.shape != (model.n_pq, 2 * model.n_pq):
                    raise DimensionMismatch(f"grid {model.name}: linear model ({w}, {t}) has wrong size")

        def stack(attr):
            return np.array([[getattr(lin, attr) for lin in row] for row in lins])

        return cls(model=model, resources=tuple(resources),
                   a_v=stack("a_v"), b_v=stack("b_v"), a_i=stack("a_i"), b_i=stack("b_i"),
                   a_d=stack("a_d"), b_d=stack("b_d"),
                   p_unc=np.asarray(p_unc, float), q_unc=np.asarray(q_unc, float),
                   slack_ref=np.array([[lin.slack_mag for lin in row] for row in lins]),
                   scale=float(scale), step_seconds=float(step_seconds))


@dataclass(frozen=True, eq=False)
class SystemData:
    mv: GridData
    lvs: tuple
    scenarios: ScenarioSet

    @property
    def shape(self) -> tuple:
        return self.mv.shape

    def lv(self, name) -> GridData:
        for g in self.lvs:
            if g.name == name:
                return g
        raise KeyError(name)

    @property
    def mvccrs(self) -> tuple:
        return self.mv.resources


def _check_topology(mv: NetworkModel, lvs) -> None:
    names = [mv.name] + [lv.name for lv in lvs]
    if len(set(names)) != len(names):
        raise SchemaError(f"grid names must be unique, got {names}")
    hosts = []
    for lv in lvs:
        if lv.pcc_bus is None:
            raise SchemaError(f"grid {lv.name}: LV grid needs 'pcc_bus' (hosting MV bus)")
        if not 1 <= lv.pcc_bus < mv.n_buses:
            raise SchemaError(f"grid {lv.name}: pcc_bus {lv.pcc_bus} is not an MV PQ bus")
        hosts.append(lv.pcc_bus)
    res_names = [r.name for r in grid_resources(mv)]
    if len(set(res_names)) != len(res_names):
        raise SchemaError(f"grid {mv.name}: resource names must be unique")
    for lv in lvs:
        lv_res = [r.name for r in grid_resources(lv)]
        if len(set(lv_res)) != len(lv_res):
            raise SchemaError(f"grid {lv.name}: resource names must be unique")


def linearize_system(mv: NetworkModel, lvs, scenarios: ScenarioSet) -> SystemData:
    """Linear models of every grid around the system-wide no-control flow.

    For each (scenario, step): the LV flows are solved at nominal PCC
    voltage, the MV flow is solved with the resulting PCC imports, and the
    LV flows are solved again at the MV hosting-bus voltage; the MV flow
    is then refreshed with the updated imports.
    """
    lvs = tuple(lvs)
    _check_topology(mv, lvs)
    scenarios.check_grids((mv,) + lvs)
    n_w, n_t = scenarios.n_scenarios, scenarios.horizon
    y_mv = build_admittance(mv)
    y_lv = [build_admittance(lv) for lv in lvs]
    scales = [lv.base_power / mv.base_power for lv in lvs]
    s_mv = scenarios.p_unc[mv.name] + 1j * scenarios.q_unc[mv.name]
    s_lv = [scenarios.p_unc[lv.name] + 1j * scenarios.q_unc[lv.name] for lv in lvs]
    lin_mv = [[None] * n_t for _ in range(n_w)]
    lin_lv = [[[None] * n_t for _ in range(n_w)] for _ in lvs]
    for w in range(n_w):
        for t in range(n_t):
            imports = [solve_ac_power_flow(lv, s[w, 1:, t], 1.0, y=y).slack_injection
                       for lv, s, y in zip(lvs, s_lv, y_lv)]
            states = None
            for _ in range(2):
                inj = s_mv[w, 1:, t].copy()
                for lv, k, imp in zip(lvs, scales, imports):
                    inj[lv.pcc_bus - 1] -= k * imp
                st_mv = solve_ac_power_flow(mv, inj, scenarios.gcp_voltage[w, t], y=y_mv)
                vmag = np.abs(st_mv.bus_voltages)
                states = [solve_ac_power_flow(lv, s[w, 1:, t], vmag[lv.pcc_bus], y=y)
                          for lv, s, y in zip(lvs, s_lv, y_lv)]
                imports = [st.slack_injection for st in states]
            inj = s_mv[w, 1:, t].copy()
            for lv, k, imp in zip(lvs, scales, imports):
                inj[lv.pcc_bus - 1] -= k * imp
            st_mv = solve_ac_power_flow(mv, inj, scenarios.gcp_voltage[w, t], y=y_mv)
            # LV imports are decision variables of the MV problem, so they belong to x0
            x0 = np.zeros(2 * mv.n_pq)
            for lv, k, imp in zip(lvs, scales, imports):
                x0[lv.pcc_bus - 1] -= k * imp.real
                x0[mv.n_pq + lv.pcc_bus - 1] -= k * imp.imag
            lin_mv[w][t] = build_linear_model(mv, st_mv, t, w, x0=x0, y=y_mv)
            for j, (lv, y) in enumerate(zip(lvs, y_lv)):
                st = solve_ac_power_flow(lv, s_lv[j][w, 1:, t], abs(st_mv.bus_voltages[lv.pcc_bus]), y=y)
                lin_lv[j][w][t] = build_linear_model(lv, st, t, w, y=y)

    def unc_sum(name):
        return scenarios.p_unc[name].sum(axis=1), scenarios.q_unc[name].sum(axis=1)

    p, q = unc_sum(mv.name)
    mv_data = GridData.from_linear_models(mv, lin_mv, p, q, grid_resources(mv), 1.0, scenarios.step_seconds)
    lv_data = []
    for j, lv in enumerate(lvs):
        p, q = unc_sum(lv.name)
        lv_data.append(GridData.from_linear_models(lv, lin_lv[j], p, q, grid_resources(lv), scales[j],
                                                   scenarios.step_seconds))
    return SystemData(mv_data, tuple(lv_data), scenarios)


# --- building blocks ------------------------------------------------------------

@dataclass
class Injection:
    """Controllable injection at one PQ bus: ``sum(coef * x[cols]) + const``.

    Terms are lists of ``(cols, coef)`` with ``cols`` of shape (W, T).
    """

    bus: int
    p_terms: list = field(default_factory=list)
    q_terms: list = field(default_factory=list)
    p_const: np.ndarray | float = 0.0
    q_const: np.ndarray | float = 0.0


def _expand(arr, ndim):
    arr = np.asarray(arr)
    return arr.reshape(arr.shape + (1,) * (ndim - arr.ndim)) if arr.ndim else arr


def _linear_expr(injections, mat, n_pq):
    """Terms and constant of ``mat @ x`` where x collects the injections.

    ``mat`` has shape (W, T, ..., 2 n_pq).
    """
    terms = []
    const = 0.0
    for inj in injections:
        cp = mat[..., inj.bus - 1]
        cq = mat[..., n_pq + inj.bus - 1]
        for cols, coef in inj.p_terms:
            terms.append((np.broadcast_to(_expand(cols, cp.ndim), cp.shape), _expand(coef, cp.ndim) * cp))
        for cols, coef in inj.q_terms:
            terms.append((np.broadcast_to(_expand(cols, cq.ndim), cq.shape), _expand(coef, cq.ndim) * cq))
        const = const + _expand(inj.p_const, cp.ndim) * cp + _expand(inj.q_const, cq.ndim) * cq
    return terms, const


def add_bess(b: QpBuilder, prefix: str, params: BessParams, shape, step_seconds, base_power):
    """BESS columns ``p, q, soc`` (W, T) with SOC recursion, bounds and capability disk."""
    n_w, n_t = shape
    p = b.add_var(f"{prefix}.p", shape)
    q = b.add_var(f"{prefix}.q", shape)
    soc = b.add_var(f"{prefix}.soc", shape, lb=params.soc_min, ub=params.soc_max)
    k = params.soc_gain(step_seconds, base_power)
    prev = np.concatenate([np.zeros((n_w, 1), int), soc[:, :-1]], axis=1)
    prev_coef = np.concatenate([np.zeros((n_w, 1)), -np.ones((n_w, n_t - 1))], axis=1)
    rhs = np.zeros(shape)
    rhs[:, 0] = params.soc_init
    b.add_rows(f"{prefix}.soc_recursion", shape, [(soc, 1.0), (prev, prev_coef), (p, k)], rhs, rhs)
    b.add_disk(f"{prefix}.capability", p, q, params.s_max)
    # f_r: one unit per step in each scenario
    b.add_constant(float(n_w * n_t))
    return {"p": p, "q": q, "soc": soc}


def add_grid(b: QpBuilder, gd: GridData, injections, nu: float, v0=None, track=True):
    """Slack-flow, power-factor, voltage and current constraints of one grid.

    ``v0`` (optional, (W, T) columns) makes the slack voltage a decision
    variable entering every voltage row as ``v0 - slack_ref``.
    """
    name = gd.name
    shape = gd.shape
    n_w, n_t = shape
    n = gd.n_pq
    mdl = gd.model
    P0 = b.add_var(f"{name}.P0", shape)
    Q0 = b.add_var(f"{name}.Q0", shape)
    Pp = b.add_var(f"{name}.Pplus", shape, lb=0.0)
    Pm = b.add_var(f"{name}.Pminus", shape, lb=0.0)

    # slack import = -(uncontrollable + controllable injections) + losses
    for comp, S0, unc in ((0, P0, gd.p_unc), (1, Q0, gd.q_unc)):
        loss_terms, loss_const = _linear_expr(injections, -gd.a_d[:, :, comp, :], n)
        direct, direct_const = [], 0.0
        for inj in injections:
            direct += inj.p_terms if comp == 0 else inj.q_terms
            direct_const = direct_const + (inj.p_const if comp == 0 else inj.q_const)
        rhs = -unc + gd.b_d[:, :, comp] - direct_const - loss_const
        b.add_rows(f"{name}.balance_{'pq'[comp]}", shape, [(S0, 1.0)] + direct + loss_terms, rhs, rhs)

    # power-factor limit through the split P0 = P+ - P-
    b.add_rows(f"{name}.pf_split", shape, [(P0, 1.0), (Pp, -1.0), (Pm, 1.0)], 0.0, 0.0)
    cos_m = mdl.cos_theta_min
    if cos_m >= 1.0:
        b.add_rows(f"{name}.pf_upper", shape, [(Q0, 1.0)], 0.0, 0.0)
        b.add_rows(f"{name}.pf_lower", shape, [(Q0, 1.0)], 0.0, 0.0)
    else:
        cot = cos_m / np.sqrt(1.0 - cos_m ** 2)
        b.add_rows(f"{name}.pf_upper", shape, [(Pp, 1.0), (Pm, 1.0), (Q0, -cot)], 0.0)
        b.add_rows(f"{name}.pf_lower", shape, [(Pp, 1.0), (Pm, 1.0), (Q0, cot)], 0.0)

    # nodal voltages
    terms, const = _linear_expr(injections, gd.a_v, n)
    base = gd.b_v + const
    if v0 is not None:
        terms.append((np.broadcast_to(v0[..., None], base.shape), 1.0))
        base = base - gd.slack_ref[..., None]
    b.add_rows(f"{name}.voltage", base.shape, terms, mdl.v_min - base, mdl.v_max - base)

    # branch currents
    terms, const = _linear_expr(injections, gd.a_i, n)
    base = gd.b_i + const
    amp = np.broadcast_to(mdl.ampacities, base.shape)
    b.add_rows(f"{name}.current", base.shape, terms, -np.inf, amp - base)

    cols = {"P0": P0, "Q0": Q0, "Pplus": Pp, "Pminus": Pm}
    if track:
        pd = b.add_var(f"{name}.p_disp", (n_t,))
        qd = b.add_var(f"{name}.q_disp", (n_t,))
        pd_b = np.broadcast_to(pd, shape)
        qd_b = np.broadcast_to(qd, shape)
        b.add_square(gd.weight, shape, [(P0, 1.0), (pd_b, -1.0)])
        b.add_square(gd.weight, shape, [(Q0, 1.0), (qd_b, -1.0)])
        cols.update(p_disp=pd, q_disp=qd)
    if nu > 0:
        b.add_square(nu, shape, [(Pp, 1.0)])
        b.add_square(nu, shape, [(Pm, 1.0)])
    return cols


def voltage_expression(gd: GridData, injections, bus: int):
    """Terms and constant of the linear voltage magnitude at ``bus`` (W, T)."""
    terms, const = _linear_expr(injections, gd.a_v[:, :, bus - 1, :], gd.n_pq)
    return terms, gd.b_v[:, :, bus - 1] + const


def _bess_injections(b, gd, prefix):
    injs, cols = [], {}
    for res in gd.resources:
        c = add_bess(b, f"{prefix}.{res.name}", res, gd.shape, gd.step_seconds, gd.model.base_power)
        cols[res.name] = c
        injs.append(Injection(res.node, [(c["p"], 1.0)], [(c["q"], 1.0)]))
    return injs, cols


def _lv_block(b, lv: GridData, nu, v0_bounds=None):
    injs, _ = _bess_injections(b, lv, lv.name)
    lo, hi = v0_bounds if v0_bounds is not None else (
        np.maximum(lv.slack_ref - MAX_SLACK_SHIFT, 0.0), lv.slack_ref + MAX_SLACK_SHIFT)
    v0 = b.add_var(f"{lv.name}.v0", lv.shape, lb=lo, ub=hi)
    cols = add_grid(b, lv, injs, nu, v0=v0)
    cols["v0"] = v0
    return cols


# --- centralized ------------------------------------------------------------------

def build_centralized(system: SystemData, nu: float = DEFAULT_NU) -> QpProblem:
    """Joint stochastic dispatch of the MV grid, its resources and every LV grid."""
    if nu < 0:
        raise ValidationError("nu must be >= 0")
    b = QpBuilder()
    mv = system.mv
    mv_injs, _ = _bess_injections(b, mv, mv.name)
    lv_cols = {}
    for lv in system.lvs:
        c = _lv_block(b, lv, nu)
        lv_cols[lv.name] = c
        mv_injs.append(Injection(lv.model.pcc_bus, [(c["P0"], -lv.scale)], [(c["Q0"], -lv.scale)]))
    add_grid(b, mv, mv_injs, nu)
    for lv in system.lvs:
        terms, const = voltage_expression(mv, mv_injs, lv.model.pcc_bus)
        b.add_rows(f"{lv.name}.pcc_voltage", mv.shape, [(lv_cols[lv.name]["v0"], 1.0)]
                   + [(c, -v) for c, v in terms], const, const)
    return b.build()


# --- ADMM subproblems -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Subproblem:
    """A base problem plus the columns that carry consensus penalties.

    ``coupling`` maps a boundary symbol to ``(cols, coef)``; the penalty
    added for symbol ``s`` is ``rho/2 * (coef * x[cols] + offset_s)**2``.
    """

    base: QpProblem
    coupling: dict

    def penalized(self, offsets: dict, rho: float) -> QpProblem:
        if not rho > 0:
            raise ValidationError("penalty parameter rho must be > 0")
        n = self.base.n
        diag = np.zeros(n)
        q = self.base.q.copy()
        const = self.base.constant
        for sym, (cols, coef) in self.coupling.items():
            off = np.asarray(offsets[sym], float)
            if off.shape != cols.shape:
                raise DimensionMismatch(f"offset {sym!r} has shape {off.shape}, expected {cols.shape}")
            np.add.at(diag, cols.ravel(), rho * coef * coef)
            np.add.at(q, cols.ravel(), (rho * coef * off).ravel())
            const += 0.5 * rho * float(np.sum(off * off))
        P = (self.base.P + sp.diags(diag, format="csc")).tocsc()
        P.sort_indices()
        return QpProblem(P, q, self.base.A, self.base.l, self.base.u, self.base.lb, self.base.ub,
                         self.base.disk_rows, self.base.disk_radius, const,
                         self.base.var_blocks, self.base.row_blocks, self.base.disk_blocks)

    def value(self, x, sym) -> np.ndarray:
        cols, coef = self.coupling[sym]
        return coef * np.asarray(x)[cols]


LV_SYMBOLS = ("p", "q", "v")
MVCCR_SYMBOLS = ("p", "q")


def lv_subproblem(system: SystemData, name: str, nu: float = DEFAULT_NU) -> Subproblem:
    """Penalty-free LV agent problem; originals reported in MV per unit."""
    lv = system.lv(name)
    b = QpBuilder()
    c = _lv_block(b, lv, nu)
    coupling = {"p": (c["P0"], lv.scale), "q": (c["Q0"], lv.scale), "v": (c["v0"], 1.0)}
    return Subproblem(b.build(), coupling)


def mvccr_subproblem(system: SystemData, name: str) -> Subproblem:
    mv = system.mv
    res = next((r for r in mv.resources if r.name == name), None)
    if res is None:
        raise KeyError(name)
    b = QpBuilder()
    c = add_bess(b, f"{mv.name}.{name}", res, mv.shape, mv.step_seconds, mv.model.base_power)
    return Subproblem(b.build(), {"p": (c["p"], 1.0), "q": (c["q"], 1.0)})


def aggregator_subproblem(system: SystemData, nu: float = DEFAULT_NU) -> Subproblem:
    """MV grid with copies of every LV boundary and every MV resource set-point."""
    mv = system.mv
    b = QpBuilder()
    injs, coupling = [], {}
    for res in mv.resources:
        P = b.add_var(f"copy.{res.name}.p", mv.shape)
        Q = b.add_var(f"copy.{res.name}.q", mv.shape)
        injs.append(Injection(res.node, [(P, 1.0)], [(Q, 1.0)]))
        coupling[f"mvccr:{res.name}:p"] = (P, -1.0)
        coupling[f"mvccr:{res.name}:q"] = (Q, -1.0)
    v_cols = {}
    for lv in system.lvs:
        P = b.add_var(f"copy.{lv.name}.p", mv.shape)
        Q = b.add_var(f"copy.{lv.name}.q", mv.shape)
        V = b.add_var(f"copy.{lv.name}.v", mv.shape)
        injs.append(Injection(lv.model.pcc_bus, [(P, -1.0)], [(Q, -1.0)]))
        v_cols[lv.name] = V
        coupling[f"lv:{lv.name}:p"] = (P, -1.0)
        coupling[f"lv:{lv.name}:q"] = (Q, -1.0)
        coupling[f"lv:{lv.name}:v"] = (V, -1.0)
    add_grid(b, mv, injs, nu)
    for lv in system.lvs:
        terms, const = voltage_expression(mv, injs, lv.model.pcc_bus)
        b.add_rows(f"{lv.name}.pcc_voltage", mv.shape, [(v_cols[lv.name], 1.0)] + [(c, -v) for c, v in terms],
                   const, const)
    return Subproblem(b.build(), coupling)


def build_lv_subproblem(system, name, copies, duals, rho, nu=DEFAULT_NU) -> QpProblem:
    """LV agent step: tracking + local constraints + ``rho/2 ||orig - copy + u||^2``."""
    sub = lv_subproblem(system, name, nu)
    return sub.penalized({s: np.asarray(duals[s]) - np.asarray(copies[s]) for s in LV_SYMBOLS}, rho)


def build_mvccr_subproblem(system, name, copies, duals, rho) -> QpProblem:
    sub = mvccr_subproblem(system, name)
    return sub.penalized({s: np.asarray(duals[s]) - np.asarray(copies[s]) for s in MVCCR_SYMBOLS}, rho)


def aggregator_offsets(originals: dict, duals: dict) -> dict:
    """``originals``/``duals`` keyed ``agent -> symbol -> (W, T)``; agent is ``lv:<n>`` or ``mvccr:<n>``."""
    out = {}
    for agent, vals in originals.items():
        for sym, arr in vals.items():
            out[f"{agent}:{sym}"] = np.asarray(arr) + np.asarray(duals[agent][sym])
    return out


def build_aggregator_problem(system, originals, duals, rho, nu=DEFAULT_NU) -> QpProblem:
    return aggregator_subproblem(system, nu).penalized(aggregator_offsets(originals, duals), rho)


# --- no-coordination baseline ----------------------------------------------------

def build_lv_standalone(system: SystemData, name: str, nu: float = DEFAULT_NU) -> QpProblem:
    """LV dispatch with the PCC voltage frozen at its operating point."""
    lv = system.lv(name)
    b = QpBuilder()
    _lv_block(b, lv, nu, v0_bounds=(lv.slack_ref, lv.slack_ref))
    return b.build()


def build_mv_standalone(system: SystemData, lv_imports: dict, nu: float = DEFAULT_NU) -> QpProblem:
    """MV dispatch with LV PCC imports frozen; ``lv_imports[name] = (P, Q)`` in LV per unit."""
    mv = system.mv
    b = QpBuilder()
    injs, _ = _bess_injections(b, mv, mv.name)
    for lv in system.lvs:
        P, Q = lv_imports[lv.name]
        injs.append(Injection(lv.model.pcc_bus, p_const=-lv.scale * np.asarray(P), q_const=-lv.scale * np.asarray(Q)))
    add_grid(b, mv, injs, nu)
    return b.build()


# --- results ----------------------------------------------------------------------

@dataclass(frozen=True)
class GridOutcome:
    """Per-scenario slack flows and resource set-points of one grid (grid per unit)."""

    name: str
    P0: np.ndarray
    Q0: np.ndarray
    p_plus: np.ndarray
    p_minus: np.ndarray
    p_disp: np.ndarray | None
    q_disp: np.ndarray | None
    bess: dict
    v0: np.ndarray | None = None


def grid_outcome(problem: QpProblem, x, name: str, resources=(), prefix=None) -> GridOutcome:
    prefix = prefix or name
    val = lambda key: problem.value(x, key) if key in problem.var_blocks else None
    bess = {}
    for res in resources:
        key = f"{prefix}.{res.name}"
        if f"{key}.p" in problem.var_blocks:
            bess[res.name] = {s: problem.value(x, f"{key}.{s}") for s in ("p", "q", "soc")}
    return GridOutcome(name, val(f"{name}.P0"), val(f"{name}.Q0"), val(f"{name}.Pplus"), val(f"{name}.Pminus"),
                       val(f"{name}.p_disp"), val(f"{name}.q_disp"), bess, val(f"{name}.v0"))


@dataclass(frozen=True)
class DispatchPlan:
    """Day-ahead plans (per unit on each grid's base). Only ``p`` is advertised."""

    p_disp: np.ndarray
    q_disp: np.ndarray
    base_power: float
    lv: dict = field(default_factory=dict)  # name -> (p, q, base_power)
    mv_name: str = "mv"
    advertised: tuple = ("p",)

    def grids(self):
        yield self.mv_name, self.p_disp, self.q_disp, self.base_power
        for name, (p, q, base) in self.lv.items():
            yield name, p, q, base


def extract_dispatch_plan(problem: QpProblem, solution: QpSolution, system: SystemData,
                          lv_sources=None) -> DispatchPlan:
    """Plans from named columns; ``lv_sources`` maps LV name to ``(problem, solution)``
    when the LV plans live in separate problems (ADMM, baseline)."""
    if solution.status != "Optimal":
        raise SolverFailure(f"refusing to extract a plan from a {solution.status} solution", solution)
    mv = system.mv
    lv = {}
    for g in system.lvs:
        prob, sol = (problem, solution) if lv_sources is None else lv_sources[g.name]
        if sol.status != "Optimal":
            raise SolverFailure(f"refusing to extract a plan from a {sol.status} solution", sol, g.name)
        lv[g.name] = (prob.value(sol.x, f"{g.name}.p_disp").copy(), prob.value(sol.x, f"{g.name}.q_disp").copy(),
                      g.model.base_power)
    return DispatchPlan(problem.value(solution.x, f"{mv.name}.p_disp").copy(),
                        problem.value(solution.x, f"{mv.name}.q_disp").copy(),
                        mv.model.base_power, lv, mv.name)


def write_plan_csv(plan: DispatchPlan, directory) -> list:
    """One ``plan_<grid>.csv`` per grid with columns ``t, p_disp_kw, q_disp_kvar``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, p, q, base in plan.grids():
        path = directory / f"plan_{name}.csv"
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t", "p_disp_kw", "q_disp_kvar"])
            for t in range(p.size):
                wr.writerow([t, repr(float(p[t] * base / 1e3)), repr(float(q[t] * base / 1e3))])
        paths.append(path)
    return paths


def read_plan_csv(path, base_power: float):
    """Back to per unit: returns ``(p, q)``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    p = np.array([float(r["p_disp_kw"]) for r in rows]) * 1e3 / base_power
    q = np.array([float(r["q_disp_kvar"]) for r in rows]) * 1e3 / base_power
    return p, q
