"""Day-ahead scenario sets: file I/O and a seeded synthetic generator.

A scenario is a joint realization across every grid: uncontrollable
nodal injections for each grid (per unit on that grid's base, one row
per bus including the slack row, which must be zero) plus the GCP voltage
magnitude imposed on the MV grid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, SchemaError

DEFAULT_STEP = 900.0
GCP_RANGE = (0.98, 1.02)


@dataclass(frozen=True)
class Scenario:
    id: int
    gcp_voltage_mag: np.ndarray
    p_unc: dict
    q_unc: dict


@dataclass(frozen=True)
class ScenarioSet:
    """All scenarios, stored as stacked arrays.

    ``p_unc[name]`` has shape ``(n_scenarios, n_buses, horizon)``.
    """

    ids: tuple
    gcp_voltage: np.ndarray
    p_unc: dict
    q_unc: dict
    step_seconds: float = DEFAULT_STEP

    def __post_init__(self):
        if len(self.ids) < 1:
            raise SchemaError("scenario set is empty")
        n_w, n_t = self.gcp_voltage.shape
        if len(self.ids) != n_w:
            raise SchemaError("scenario ids and voltage rows disagree")
        if np.any(self.gcp_voltage < 0.9) or np.any(self.gcp_voltage > 1.1):
            raise SchemaError("GCP voltage outside [0.9, 1.1]")
        for name in self.p_unc:
            for arr in (self.p_unc[name], self.q_unc[name]):
                if arr.ndim != 3 or arr.shape[0] != n_w or arr.shape[2] != n_t:
                    raise DimensionMismatch(f"grid {name}: injection array shape {arr.shape} "
                                            f"does not match ({n_w}, n_bus, {n_t})")
                if np.any(arr[:, 0, :] != 0.0):
                    raise SchemaError(f"grid {name}: non-zero injection on the slack bus")

    @property
    def n_scenarios(self) -> int:
        return len(self.ids)

    @property
    def horizon(self) -> int:
        return self.gcp_voltage.shape[1]

    @property
    def grid_names(self) -> list:
        return list(self.p_unc)

    def scenario(self, w: int) -> Scenario:
        return Scenario(
            id=self.ids[w],
            gcp_voltage_mag=self.gcp_voltage[w],
            p_unc={g: a[w] for g, a in self.p_unc.items()},
            q_unc={g: a[w] for g, a in self.q_unc.items()},
        )

    def check_grids(self, grids) -> None:
        """Raise ``DimensionMismatch`` unless every grid has matching data."""
        for model in grids:
            if model.name not in self.p_unc:
                raise DimensionMismatch(f"grid {model.name}: no scenario data")
            n_bus = self.p_unc[model.name].shape[1]
            if n_bus != model.n_buses:
                raise DimensionMismatch(f"grid {model.name}: scenarios have {n_bus} buses, "
                                        f"grid file has {model.n_buses}")

    def subset(self, scenarios=None, horizon=None) -> "ScenarioSet":
        w = slice(None) if scenarios is None else list(scenarios)
        t = slice(None) if horizon is None else slice(0, horizon)
        ids = tuple(np.asarray(self.ids)[w].tolist()) if scenarios is not None else self.ids
        return ScenarioSet(
            ids=ids,
            gcp_voltage=self.gcp_voltage[w][:, t],
            p_unc={g: a[w][:, :, t] for g, a in self.p_unc.items()},
            q_unc={g: a[w][:, :, t] for g, a in self.q_unc.items()},
            step_seconds=self.step_seconds,
        )


def scenarios_to_dict(sset: ScenarioSet) -> dict:
    return {
        "step_seconds": sset.step_seconds,
        "scenarios": [
            {
                "id": sset.ids[w],
                "gcp_voltage_mag": sset.gcp_voltage[w].tolist(),
                "grids": {
                    g: {"p_unc": sset.p_unc[g][w].tolist(), "q_unc": sset.q_unc[g][w].tolist()}
                    for g in sset.p_unc
                },
            }
            for w in range(sset.n_scenarios)
        ],
    }


def scenarios_from_dict(doc: dict, grids=None) -> ScenarioSet:
    if "scenarios" not in doc or not isinstance(doc["scenarios"], list):
        raise SchemaError("scenario file needs a 'scenarios' list")
    items = doc["scenarios"]
    if not items:
        raise SchemaError("scenario file contains no scenarios")
    names = list(items[0].get("grids", {}))
    horizon = len(items[0].get("gcp_voltage_mag", []))
    if horizon == 0:
        raise SchemaError("scenario 0: empty gcp_voltage_mag")
    p, q = {g: [] for g in names}, {g: [] for g in names}
    volts, ids = [], []
    for k, sc in enumerate(items):
        v = np.asarray(sc.get("gcp_voltage_mag", []), float)
        if v.shape != (horizon,):
            raise DimensionMismatch(f"scenario {k}: gcp_voltage_mag has {v.size} steps, expected {horizon}")
        volts.append(v)
        ids.append(sc.get("id", k))
        if set(sc.get("grids", {})) != set(names):
            raise SchemaError(f"scenario {k}: grid set differs from scenario 0")
        for g in names:
            for key, store in (("p_unc", p), ("q_unc", q)):
                try:
                    arr = np.asarray(sc["grids"][g][key], float)
                except (KeyError, ValueError) as exc:
                    raise SchemaError(f"scenario {k}, grid {g}: bad '{key}' ({exc})") from None
                if arr.ndim != 2 or arr.shape[1] != horizon:
                    raise DimensionMismatch(f"scenario {k}, grid {g}: '{key}' shape {arr.shape}, "
                                            f"expected (n_bus, {horizon})")
                if store[g] and arr.shape != store[g][0].shape:
                    bad_t = min(arr.shape[0], store[g][0].shape[0])
                    raise DimensionMismatch(f"scenario {k}, grid {g}: {arr.shape[0]} buses vs "
                                            f"{store[g][0].shape[0]} in scenario 0 (first differing bus {bad_t})")
                store[g].append(arr)
    sset = ScenarioSet(
        ids=tuple(ids),
        gcp_voltage=np.stack(volts),
        p_unc={g: np.stack(p[g]) for g in names},
        q_unc={g: np.stack(q[g]) for g in names},
        step_seconds=float(doc.get("step_seconds", DEFAULT_STEP)),
    )
    if grids is not None:
        sset.check_grids(grids)
    return sset


def load_scenarios(path, grids=None) -> ScenarioSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return scenarios_from_dict(doc, grids)


def save_scenarios(sset: ScenarioSet, path) -> None:
    Path(path).write_text(json.dumps(scenarios_to_dict(sset)) + "\n")


# --- synthetic scenarios -----------------------------------------------------

@dataclass(frozen=True)
class GridProfile:
    """Nominal uncontrollable units of one grid (per unit on that grid's base).

    ``loads`` entries are ``(bus, p_peak, q_over_p)``; ``pv`` entries are
    ``(bus, p_peak)``.
    """

    n_buses: int
    loads: tuple = ()
    pv: tuple = ()


@dataclass(frozen=True)
class SynthSpec:
    grids: dict
    n_scenarios: int = 7
    horizon: int = 96
    step_seconds: float = DEFAULT_STEP
    load_noise: float = 0.02
    pv_noise: float = 0.15
    gcp_range: tuple = GCP_RANGE
    extra: dict = field(default_factory=dict)


def synth_spec_from_dict(doc: dict) -> SynthSpec:
    try:
        grids = {
            name: GridProfile(
                n_buses=int(g["n_buses"]),
                loads=tuple((int(b), float(p), float(r)) for b, p, r in g.get("loads", [])),
                pv=tuple((int(b), float(p)) for b, p in g.get("pv", [])),
            )
            for name, g in doc["grids"].items()
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"synth spec: bad grid profile ({exc})") from None
    return SynthSpec(
        grids=grids,
        n_scenarios=int(doc.get("n_scenarios", 7)),
        horizon=int(doc.get("horizon", 96)),
        step_seconds=float(doc.get("step_seconds", DEFAULT_STEP)),
        load_noise=float(doc.get("load_noise", 0.02)),
        pv_noise=float(doc.get("pv_noise", 0.15)),
        gcp_range=tuple(doc.get("gcp_range", GCP_RANGE)),
    )


def synth_spec_to_dict(spec: SynthSpec) -> dict:
    return {
        "n_scenarios": spec.n_scenarios,
        "horizon": spec.horizon,
        "step_seconds": spec.step_seconds,
        "load_noise": spec.load_noise,
        "pv_noise": spec.pv_noise,
        "gcp_range": list(spec.gcp_range),
        "grids": {
            name: {"n_buses": g.n_buses, "loads": [list(x) for x in g.loads], "pv": [list(x) for x in g.pv]}
            for name, g in spec.grids.items()
        },
    }


def clear_sky_shape(hours: np.ndarray) -> np.ndarray:
    x = np.clip((hours - 6.0) / 12.0, 0.0, 1.0)
    return np.sin(np.pi * x) ** 1.2


def double_hump_shape(hours: np.ndarray) -> np.ndarray:
    shape = (0.45 + 0.35 * np.exp(-((hours - 8.0) / 2.0) ** 2)
             + 0.55 * np.exp(-((hours - 19.0) / 2.5) ** 2))
    return shape / shape.max()


def synthesize_scenarios(spec: SynthSpec, seed: int) -> ScenarioSet:
    """Seeded scenario set.

    Weather (PV factor) and day-type (load factor, intraday wiggle) draws are
    shared by all grids; GCP voltage is i.i.d. uniform per (scenario, step).
    """
    if spec.n_scenarios < 1 or spec.horizon < 1:
        raise SchemaError("synth spec needs n_scenarios >= 1 and horizon >= 1")
    rng = np.random.default_rng(seed)
    n_w, n_t = spec.n_scenarios, spec.horizon
    hours = np.mod((np.arange(n_t) + 0.5) * spec.step_seconds / 3600.0, 24.0)
    pv_factor = 1.0 + spec.pv_noise * rng.uniform(-1.0, 1.0, size=n_w)
    load_factor = 1.0 + spec.load_noise * rng.standard_normal(n_w)
    wiggle = np.zeros((n_w, n_t))
    eta = rng.standard_normal((n_w, n_t))
    for t in range(n_t):
        wiggle[:, t] = (0.9 * wiggle[:, t - 1] if t else 0.0) + np.sqrt(1 - 0.81) * eta[:, t]
    lo, hi = spec.gcp_range
    gcp = rng.uniform(lo, hi, size=(n_w, n_t))

    load_shape = double_hump_shape(hours)
    pv_shape = clear_sky_shape(hours)
    load_mult = load_factor[:, None] * (1.0 + 0.5 * spec.load_noise * wiggle) * load_shape[None, :]
    pv_mult = np.clip(pv_factor, 0.0, None)[:, None] * pv_shape[None, :]

    p, q = {}, {}
    for name, g in spec.grids.items():
        pa = np.zeros((n_w, g.n_buses, n_t))
        qa = np.zeros((n_w, g.n_buses, n_t))
        for bus, p_peak, q_ratio in g.loads:
            pa[:, bus, :] -= p_peak * load_mult
            qa[:, bus, :] -= p_peak * q_ratio * load_mult
        for bus, p_peak in g.pv:
            pa[:, bus, :] += p_peak * pv_mult
        p[name], q[name] = pa, qa
    return ScenarioSet(tuple(range(n_w)), gcp, p, q, spec.step_seconds)


def point_forecast(sset: ScenarioSet) -> ScenarioSet:
    """Scenario-mean injections (GCP voltage averaged too), as a one-scenario set."""
    return ScenarioSet(
        ids=(0,),
        gcp_voltage=sset.gcp_voltage.mean(axis=0, keepdims=True),
        p_unc={g: a.mean(axis=0, keepdims=True) for g, a in sset.p_unc.items()},
        q_unc={g: a.mean(axis=0, keepdims=True) for g, a in sset.q_unc.items()},
        step_seconds=sset.step_seconds,
    )
