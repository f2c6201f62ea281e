"""Sensitivity coefficients and the per-timestep linear grid model.

The linear model maps controllable nodal injections ``x = [P; Q]`` (one
entry per non-slack bus each) to voltage magnitudes, branch current
magnitudes and aggregate losses::

    |V| = a_v @ x + b_v
    |I| = a_i @ x + b_i
    [P_loss, Q_loss] = a_d @ x + b_d

The offsets absorb the uncontrollable injections of the operating point,
so the model is tangent to the AC solution at ``x = x0``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import OutOfLinearRange, SingularSensitivity
from .network import GridState, NetworkModel, build_admittance

CURRENT_EPS = 1e-6
MAX_SLACK_SHIFT = 0.05


@dataclass(frozen=True)
class SensitivityCoefficients:
    """Partial derivatives w.r.t. nodal (P, Q) injections at non-slack buses.

    Voltage arrays include the slack row (always zero).
    """

    dv_dp: np.ndarray
    dv_dq: np.ndarray
    di_dp: np.ndarray
    di_dq: np.ndarray
    dploss: np.ndarray
    dqloss: np.ndarray


@dataclass(frozen=True)
class LinearGridModel:
    a_v: np.ndarray
    b_v: np.ndarray
    a_i: np.ndarray
    b_i: np.ndarray
    a_d: np.ndarray
    b_d: np.ndarray
    x0: np.ndarray
    slack_mag: float
    t: int = 0
    scenario: int = 0

    @property
    def n_pq(self) -> int:
        return self.a_v.shape[0]

    def evaluate(self, p, q):
        x = np.concatenate([np.asarray(p, float), np.asarray(q, float)])
        return self.a_v @ x + self.b_v, self.a_i @ x + self.b_i, self.a_d @ x + self.b_d


def _voltage_derivatives(model: NetworkModel, state: GridState, y: np.ndarray):
    """Complex dV (non-slack rows) per unit P and per unit Q injection at each PQ bus."""
    v = state.bus_voltages
    i_bus = y @ v
    n = model.n_pq
    m1 = np.diag(np.conj(i_bus[1:]))
    m2 = np.diag(v[1:]) @ np.conj(y[1:, 1:])
    # dS = m1 dV + m2 conj(dV), dV = a + jb
    ca = m1 + m2
    cb = 1j * (m1 - m2)
    lhs = np.block([[ca.real, cb.real], [ca.imag, cb.imag]])
    rhs = np.zeros((2 * n, 2 * n))
    rhs[:n, :n] = np.eye(n)  # dP_k -> Re(dS_k) = 1
    rhs[n:, n:] = np.eye(n)  # dQ_k -> Im(dS_k) = 1
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSensitivity(str(exc)) from None
    if not np.all(np.isfinite(sol)):
        raise SingularSensitivity("non-finite sensitivity solution")
    dv = sol[:n] + 1j * sol[n:]
    return dv[:, :n], dv[:, n:]


def compute_sensitivity_coefficients(model: NetworkModel, state: GridState,
                                     y: np.ndarray | None = None) -> SensitivityCoefficients:
    if y is None:
        y = build_admittance(model)
    v = state.bus_voltages
    dv_p, dv_q = _voltage_derivatives(model, state, y)
    n = model.n_pq

    def vmag(dv):
        out = np.zeros((model.n_buses, n))
        out[1:] = (np.conj(v[1:])[:, None] * dv).real / np.abs(v[1:])[:, None]
        return out

    def full(dv):
        return np.vstack([np.zeros((1, n), dtype=complex), dv])

    dvf_p, dvf_q = full(dv_p), full(dv_q)
    cur = state.branch_currents
    denom = np.sqrt(np.abs(cur) ** 2 + CURRENT_EPS ** 2)

    def imag_sc(dvf):
        out = np.empty((model.n_branches, n))
        for k, br in enumerate(model.branches):
            ys = 1.0 / br.series_impedance
            di = ys * (dvf[br.from_bus] - dvf[br.to_bus]) + 0.5 * br.shunt_admittance_total * dvf[br.from_bus]
            out[k] = (np.conj(cur[k]) * di).real / denom[k]
        return out

    ds0_p = v[0] * np.conj(y[0] @ dvf_p)
    ds0_q = v[0] * np.conj(y[0] @ dvf_q)
    dloss_p = ds0_p + 1.0
    dloss_q = ds0_q + 1j
    return SensitivityCoefficients(
        dv_dp=vmag(dv_p),
        dv_dq=vmag(dv_q),
        di_dp=imag_sc(dvf_p),
        di_dq=imag_sc(dvf_q),
        dploss=np.concatenate([dloss_p.real, dloss_q.real]),
        dqloss=np.concatenate([dloss_p.imag, dloss_q.imag]),
    )


def build_linear_model(model: NetworkModel, state: GridState, t: int = 0, scenario: int = 0,
                       x0=None, y: np.ndarray | None = None) -> LinearGridModel:
    """Linearize around ``state``.

    ``x0`` is the controllable part of the operating-point injections
    (``[P; Q]`` over PQ buses); zero means the state is the no-control flow.
    """
    sc = compute_sensitivity_coefficients(model, state, y)
    n = model.n_pq
    x0 = np.zeros(2 * n) if x0 is None else np.asarray(x0, float)
    a_v = np.hstack([sc.dv_dp[1:], sc.dv_dq[1:]])
    a_i = np.hstack([sc.di_dp, sc.di_dq])
    a_d = np.vstack([sc.dploss, sc.dqloss])
    loss = np.array([state.total_loss.real, state.total_loss.imag])
    return LinearGridModel(
        a_v=a_v,
        b_v=np.abs(state.bus_voltages[1:]) - a_v @ x0,
        a_i=a_i,
        b_i=np.abs(state.branch_currents) - a_i @ x0,
        a_d=a_d,
        b_d=loss - a_d @ x0,
        x0=x0,
        slack_mag=float(abs(state.bus_voltages[0])),
        t=t,
        scenario=scenario,
    )


def shift_slack_voltage(lin: LinearGridModel, new_slack_mag: float) -> LinearGridModel:
    delta = float(new_slack_mag) - lin.slack_mag
    if abs(delta) > MAX_SLACK_SHIFT:
        raise OutOfLinearRange(f"slack shift {delta:+.4f} pu exceeds +/-{MAX_SLACK_SHIFT}")
    if delta == 0.0:
        return lin
    return replace(lin, b_v=lin.b_v + delta, slack_mag=float(new_slack_mag))


def dump_linear_model_csv(lin: LinearGridModel, directory, prefix: str = "") -> list[Path]:
    """Write each matrix/vector as a row-major CSV file for external checks."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("a_v", "b_v", "a_i", "b_i", "a_d", "b_d"):
        arr = np.atleast_2d(getattr(lin, name))
        path = directory / f"{prefix}{name}.csv"
        np.savetxt(path, arr, delimiter=",", fmt="%.17g")
        written.append(path)
    return written
