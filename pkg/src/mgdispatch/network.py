"""Single-grid electrical model and exact AC power flow.

Everything is per unit on the grid's own base. Bus 0 is the slack bus
(GCP for the MV grid, PCC for an LV grid); every other bus is a PQ node.
Injections are positive when power flows *into* the network at a bus.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import NonConvergence, SchemaError


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_impedance: complex
    shunt_admittance_total: complex = 0j
    ampacity: float = np.inf

    def __post_init__(self):
        if abs(self.series_impedance) == 0.0:
            raise SchemaError(f"branch {self.from_bus}-{self.to_bus}: zero series impedance")
        if not self.ampacity > 0:
            raise SchemaError(f"branch {self.from_bus}-{self.to_bus}: ampacity must be > 0")
        if self.from_bus == self.to_bus:
            raise SchemaError(f"branch {self.from_bus}-{self.to_bus}: self loop")


@dataclass(frozen=True)
class NetworkModel:
    """Immutable description of one grid.

    ``resources`` holds the raw resource records from the grid file; they
    are interpreted by :mod:`mgdispatch.resources`.
    """

    n_buses: int
    branches: tuple[Branch, ...]
    base_power: float
    base_voltage: float
    v_min: float = 0.95
    v_max: float = 1.05
    cos_theta_min: float = 0.9
    name: str = "mv"
    pcc_bus: int | None = None
    tracking_weight: float = 1.0
    resources: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.n_buses < 2:
            raise SchemaError(f"{self.name}: need at least a slack and one PQ bus")
        if self.base_power <= 0 or self.base_voltage <= 0:
            raise SchemaError(f"{self.name}: per-unit bases must be positive")
        if not self.v_min < 1.0 < self.v_max:
            raise SchemaError(f"{self.name}: need v_min < 1 < v_max")
        if not 0.0 < self.cos_theta_min <= 1.0:
            raise SchemaError(f"{self.name}: cos_theta_min must lie in (0, 1]")
        for br in self.branches:
            for b in (br.from_bus, br.to_bus):
                if not 0 <= b < self.n_buses:
                    raise SchemaError(f"{self.name}: branch references unknown bus {b}")
        if not self._connected():
            raise SchemaError(f"{self.name}: network graph is not connected")

    def _connected(self) -> bool:
        adj = [[] for _ in range(self.n_buses)]
        for br in self.branches:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
        seen = {0}
        stack = [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == self.n_buses

    @property
    def n_pq(self) -> int:
        return self.n_buses - 1

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def ampacities(self) -> np.ndarray:
        return np.array([br.ampacity for br in self.branches], dtype=float)

    @property
    def base_current(self) -> float:
        return self.base_power / (np.sqrt(3.0) * self.base_voltage)


@dataclass(frozen=True)
class GridState:
    bus_voltages: np.ndarray
    branch_currents: np.ndarray
    slack_injection: complex
    total_loss: complex
    injections: np.ndarray
    iterations: int = 0
    mismatch: float = 0.0

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.bus_voltages)

    @property
    def i_mag(self) -> np.ndarray:
        return np.abs(self.branch_currents)


def build_admittance(model: NetworkModel) -> np.ndarray:
    """Dense bus admittance matrix with pi-model branches."""
    seen = set()
    for br in model.branches:
        key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus))
        if key in seen and abs(br.series_impedance) == 0:
            raise SchemaError(f"duplicate zero-impedance branch {key}")
        seen.add(key)
    y = np.zeros((model.n_buses, model.n_buses), dtype=complex)
    for br in model.branches:
        ys = 1.0 / br.series_impedance
        half = br.shunt_admittance_total / 2.0
        f, t = br.from_bus, br.to_bus
        y[f, f] += ys + half
        y[t, t] += ys + half
        y[f, t] -= ys
        y[t, f] -= ys
    return y


def branch_currents(model: NetworkModel, v: np.ndarray) -> np.ndarray:
    """Sending-end currents of every branch."""
    out = np.empty(model.n_branches, dtype=complex)
    for k, br in enumerate(model.branches):
        ys = 1.0 / br.series_impedance
        out[k] = ys * (v[br.from_bus] - v[br.to_bus]) + 0.5 * br.shunt_admittance_total * v[br.from_bus]
    return out


def branch_losses(model: NetworkModel, v: np.ndarray) -> complex:
    """Sum of complex power absorbed by all branches (series and shunt)."""
    total = 0j
    for br in model.branches:
        ys = 1.0 / br.series_impedance
        half = 0.5 * br.shunt_admittance_total
        vf, vt = v[br.from_bus], v[br.to_bus]
        i_f = ys * (vf - vt) + half * vf
        i_t = ys * (vt - vf) + half * vt
        total += vf * np.conj(i_f) + vt * np.conj(i_t)
    return complex(total)


def solve_ac_power_flow(model: NetworkModel, nodal_injections, slack_voltage: complex = 1.0,
                        tol: float = 1e-10, max_iter: int = 30, y: np.ndarray | None = None) -> GridState:
    """Full Newton-Raphson in polar coordinates from a flat start.

    ``nodal_injections`` covers the non-slack buses (length ``n_buses - 1``).
    """
    s_spec = np.asarray(nodal_injections, dtype=complex)
    if s_spec.shape != (model.n_pq,):
        raise ValueError(f"expected {model.n_pq} injections, got shape {s_spec.shape}")
    if not np.all(np.isfinite(s_spec)):
        raise ValueError("injections must be finite")
    if not 0.5 < abs(slack_voltage) < 1.5:
        raise ValueError(f"slack voltage magnitude {abs(slack_voltage)} outside (0.5, 1.5)")
    if y is None:
        y = build_admittance(model)

    v, it, mismatch, status = K.newton_pf(y, s_spec, complex(slack_voltage), tol, max_iter)
    if status != 0:
        raise NonConvergence(it, mismatch)
    s0 = complex(v[0] * np.conj(y[0] @ v))
    return GridState(
        bus_voltages=v,
        branch_currents=branch_currents(model, v),
        slack_injection=s0,
        total_loss=branch_losses(model, v),
        injections=s_spec.copy(),
        iterations=it,
        mismatch=mismatch,
    )


# --- grid description files -------------------------------------------------

_REQUIRED = ("base_power_va", "base_voltage_v", "v_min", "v_max", "cos_theta_min", "buses", "branches")


def model_from_dict(doc: dict) -> NetworkModel:
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise SchemaError(f"grid file missing keys: {', '.join(missing)}")
    ids = [int(b["id"]) for b in doc["buses"]]
    if sorted(ids) != list(range(len(ids))):
        raise SchemaError("bus ids must be 0..n-1 with bus 0 the slack")
    branches = []
    for k, br in enumerate(doc["branches"]):
        try:
            branches.append(Branch(
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                series_impedance=complex(float(br["r_pu"]), float(br["x_pu"])),
                shunt_admittance_total=complex(0.0, float(br.get("b_shunt_pu", 0.0))),
                ampacity=float(br.get("ampacity_pu", np.inf)),
            ))
        except KeyError as exc:
            raise SchemaError(f"branch {k}: missing field {exc}") from None
    return NetworkModel(
        n_buses=len(ids),
        branches=tuple(branches),
        base_power=float(doc["base_power_va"]),
        base_voltage=float(doc["base_voltage_v"]),
        v_min=float(doc["v_min"]),
        v_max=float(doc["v_max"]),
        cos_theta_min=float(doc["cos_theta_min"]),
        name=str(doc.get("name", "mv")),
        pcc_bus=None if doc.get("pcc_bus") is None else int(doc["pcc_bus"]),
        tracking_weight=float(doc.get("tracking_weight", 1.0)),
        resources=tuple(doc.get("resources", ())),
    )


def model_to_dict(model: NetworkModel) -> dict:
    doc = {
        "name": model.name,
        "base_power_va": model.base_power,
        "base_voltage_v": model.base_voltage,
        "v_min": model.v_min,
        "v_max": model.v_max,
        "cos_theta_min": model.cos_theta_min,
        "buses": [{"id": i} for i in range(model.n_buses)],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "r_pu": br.series_impedance.real,
                "x_pu": br.series_impedance.imag,
                "b_shunt_pu": br.shunt_admittance_total.imag,
                "ampacity_pu": br.ampacity,
            }
            for br in model.branches
        ],
        "resources": list(model.resources),
    }
    if model.pcc_bus is not None:
        doc["pcc_bus"] = model.pcc_bus
    if model.tracking_weight != 1.0:
        doc["tracking_weight"] = model.tracking_weight
    return doc


def load_grid(path) -> NetworkModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return model_from_dict(doc)


def save_grid(model: NetworkModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")
