"""Controllable resources: the BESS capability set and its (constant) cost.

Sign convention: ``p > 0`` is discharge (injection into the grid). Powers
are per unit on the base of the grid the BESS is connected to.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaError

DEFAULT_MARGIN = 0.1
DEFAULT_SOC_INIT = 0.5
CHECK_TOL = 1e-6


@dataclass(frozen=True)
class BessParams:
    node: int
    s_max: float
    e_max: float  # Wh
    soc_init: float = DEFAULT_SOC_INIT
    margin: float = DEFAULT_MARGIN
    name: str = "bess"

    def __post_init__(self):
        if not self.s_max > 0:
            raise SchemaError(f"{self.name}: s_max must be > 0")
        if not self.e_max > 0:
            raise SchemaError(f"{self.name}: e_max must be > 0")
        if not 0.0 <= self.margin < 0.5:
            raise SchemaError(f"{self.name}: margin must lie in [0, 0.5)")
        if not self.margin <= self.soc_init <= 1.0 - self.margin:
            raise SchemaError(f"{self.name}: soc_init outside [a, 1-a]")
        if self.node < 1:
            raise SchemaError(f"{self.name}: BESS cannot sit on the slack bus")

    @property
    def soc_min(self) -> float:
        return self.margin

    @property
    def soc_max(self) -> float:
        return 1.0 - self.margin

    def soc_gain(self, step_seconds: float, base_power: float) -> float:
        """SOC drop per step for a 1 pu discharge."""
        return base_power * step_seconds / (self.e_max * 3600.0)


@dataclass(frozen=True)
class ResourceProfile:
    name: str
    p: np.ndarray  # (n_scenarios, horizon)
    q: np.ndarray


@dataclass(frozen=True)
class BessConstraintBlock:
    """Constraints of one BESS over one scenario, on local columns ``[p, q, soc]``.

    ``eq_matrix @ [p; q; soc] == eq_rhs`` is the SOC recursion; ``soc``
    has box bounds; every ``(p_t, q_t)`` pair lies in a disk of radius
    ``radius``.
    """

    eq_matrix: np.ndarray
    eq_rhs: np.ndarray
    soc_lower: float
    soc_upper: float
    radius: float
    gain: float


def bess_from_dict(doc: dict, index: int = 0) -> BessParams:
    if doc.get("type", "bess") != "bess":
        raise SchemaError(f"unsupported resource type {doc.get('type')!r}")
    try:
        return BessParams(
            node=int(doc["node"]),
            s_max=float(doc["s_max_pu"]),
            e_max=float(doc["e_max_wh"]),
            soc_init=float(doc.get("soc_init", DEFAULT_SOC_INIT)),
            margin=float(doc.get("margin_a", DEFAULT_MARGIN)),
            name=str(doc.get("name", f"bess{index}")),
        )
    except KeyError as exc:
        raise SchemaError(f"resource {index}: missing field {exc}") from None


def bess_to_dict(params: BessParams) -> dict:
    return {
        "type": "bess",
        "name": params.name,
        "node": params.node,
        "s_max_pu": params.s_max,
        "e_max_wh": params.e_max,
        "soc_init": params.soc_init,
        "margin_a": params.margin,
    }


def grid_resources(model) -> list[BessParams]:
    out = [bess_from_dict(r, i) for i, r in enumerate(model.resources)]
    for r in out:
        if r.node >= model.n_buses:
            raise SchemaError(f"{model.name}/{r.name}: node {r.node} does not exist")
    return out


def bess_constraints(params: BessParams, horizon: int, step_seconds: float = 900.0,
                     base_power: float = 1.0) -> BessConstraintBlock:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = horizon
    k = params.soc_gain(step_seconds, base_power)
    eq = np.zeros((n, 3 * n))
    # soc_t - soc_{t-1} + k p_t = 0, soc_0 = soc_init
    eq[np.arange(n), np.arange(n)] = k
    eq[np.arange(n), 2 * n + np.arange(n)] = 1.0
    eq[np.arange(1, n), 2 * n + np.arange(n - 1)] = -1.0
    rhs = np.zeros(n)
    rhs[0] = params.soc_init
    return BessConstraintBlock(eq, rhs, params.soc_min, params.soc_max, params.s_max, k)


def bess_cost(profile) -> float:
    """Feasibility objective: one unit per timestep, independent of the set-points."""
    p = np.asarray(profile.p if isinstance(profile, ResourceProfile) else profile)
    return float(p.shape[-1])


def soc_trajectory(params: BessParams, p, step_seconds: float = 900.0, base_power: float = 1.0) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, float))
    k = params.soc_gain(step_seconds, base_power)
    return params.soc_init - k * np.cumsum(p, axis=-1)


@dataclass(frozen=True)
class Violation:
    kind: str  # "apparent_power" | "soc_lower" | "soc_upper"
    scenario: int
    t: int
    excess: float


def capability_check(params: BessParams, profile: ResourceProfile, step_seconds: float = 900.0,
                     base_power: float = 1.0, tol: float = CHECK_TOL) -> list[Violation]:
    p = np.atleast_2d(np.asarray(profile.p, float))
    q = np.atleast_2d(np.asarray(profile.q, float))
    if p.shape != q.shape:
        raise ValueError("p and q profiles differ in shape")
    out = []
    s = np.hypot(p, q) - params.s_max
    for w, t in zip(*np.nonzero(s > tol)):
        out.append(Violation("apparent_power", int(w), int(t), float(s[w, t])))
    soc = soc_trajectory(params, p, step_seconds, base_power)
    lo = params.soc_min - soc
    hi = soc - params.soc_max
    for w, t in zip(*np.nonzero(lo > tol)):
        out.append(Violation("soc_lower", int(w), int(t), float(lo[w, t])))
    for w, t in zip(*np.nonzero(hi > tol)):
        out.append(Violation("soc_upper", int(w), int(t), float(hi[w, t])))
    out.sort(key=lambda v: (v.scenario, v.t, v.kind))
    return out
