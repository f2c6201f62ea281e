"""Shipped test systems.

``toy``: 3-bus MV feeder, two 2-bus LV grids, one MV BESS and one BESS in
each LV grid; 2 scenarios of 8 three-hour steps.

``cigre``: CIGRE-like system. MV = feeder 1 of the CIGRE MV benchmark
(buses 1-11, bus 1 is the GCP, 20 kV cables, loads of the benchmark without
the 15 MW load at bus 1). LV = the residential CIGRE LV feeder R1-R18
(400 V). Two identical LV grids hang off MV buses N5 and N6. Resources
follow the published test case: MV BESS 0.75 MW / 1 MWh at N2, MV PV
1.25 MWp at N3, and in every LV grid PV 100 kWp at n9, PV 50 kWp at n11
and a BESS 250 kW / 500 kWh at n15. Line data are approximate (the
benchmark publications list them per km; values used here are below).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .network import Branch, NetworkModel, model_to_dict
from .scenarios import GridProfile, SynthSpec, synth_spec_to_dict, synthesize_scenarios

MV_BASE_POWER = 12e6
MV_BASE_VOLTAGE = 20e3
LV_BASE_POWER = 400e3
LV_BASE_VOLTAGE = 400.0
OMEGA = 2 * np.pi * 50


def _mv_zbase():
    return MV_BASE_VOLTAGE ** 2 / MV_BASE_POWER


def _lv_zbase():
    return LV_BASE_VOLTAGE ** 2 / LV_BASE_POWER


def _bess(name, node, p_w, e_wh, base):
    return {"type": "bess", "name": name, "node": node, "s_max_pu": p_w / base, "e_max_wh": e_wh,
            "soc_init": 0.5, "margin_a": 0.1}


# --- CIGRE-like ---------------------------------------------------------------

# (from, to, km); bus numbers are benchmark numbers, index = number - 1
MV_LINES = [(1, 2, 2.82), (2, 3, 4.42), (3, 4, 0.61), (4, 5, 0.56), (5, 6, 1.54),
            (3, 8, 1.30), (8, 7, 1.67), (8, 9, 0.32), (9, 10, 0.77), (10, 11, 0.33)]
MV_CABLE = (0.501, 0.716, 151.17e-9, 145.0)  # ohm/km, ohm/km, F/km, A
# residential (MVA, pf 0.97) and commercial/industrial (MVA, pf 0.85)
MV_LOADS_R = {3: 0.285, 4: 0.445, 5: 0.750, 6: 0.565, 8: 0.605, 10: 0.490, 11: 0.340}
MV_LOADS_CI = {3: 0.265, 7: 0.090, 9: 0.675, 10: 0.080}

# R1..R18, index = number - 1
LV_LINES = [(k, k + 1, 0.035, "UG1") for k in range(1, 10)] + [
    (3, 11, 0.030, "UG3"), (4, 12, 0.035, "UG3"), (12, 13, 0.035, "UG3"), (13, 14, 0.035, "UG3"),
    (14, 15, 0.030, "UG3"), (6, 16, 0.030, "UG3"), (9, 17, 0.030, "UG3"), (10, 18, 0.030, "UG3")]
LV_CABLES = {"UG1": (0.162, 0.0832, 0.95), "UG3": (0.822, 0.0847, 0.8)}  # ohm/km, ohm/km, ampacity pu
LV_LOADS = {11: 15e3, 15: 52e3, 16: 55e3, 17: 35e3, 18: 47e3}  # VA, pf 0.95

# The benchmark cables give voltage drops well beyond +/-5 % once both LV
# grids are attached; impedances are scaled down (and the MV cable rated
# higher) so the no-control flow stays inside [0.95, 1.05].
MV_IMPEDANCE_SCALE = 0.25
MV_AMPACITY_A = 400.0
LV_IMPEDANCE_SCALE = 0.15

CIGRE_LV_HOSTS = (5, 6)
# Deviations of a few kW are ~1e-3 pu on the MV base, so with unit weights
# the nu-penalty on the slack import (~1e-3 * 0.3**2 per step) outweighs
# tracking and the batteries end up peak shaving. These weights restore the
# intended priority: MV tracking first, LV tracking second.
CIGRE_MV_TRACKING_WEIGHT = 1e4
CIGRE_LV_TRACKING_WEIGHT = 1.0


def cigre_mv(tracking_weight: float = CIGRE_MV_TRACKING_WEIGHT) -> NetworkModel:
    zb = _mv_zbase()
    r, x, c, _ = MV_CABLE
    k = MV_IMPEDANCE_SCALE
    ibase = MV_BASE_POWER / (np.sqrt(3) * MV_BASE_VOLTAGE)
    branches = tuple(
        Branch(f - 1, t - 1, k * complex(r * km, x * km) / zb, complex(0.0, OMEGA * c * km * zb),
               MV_AMPACITY_A / ibase)
        for f, t, km in MV_LINES
    )
    res = (_bess("bess_mv", 1, 0.75e6, 1.0e6, MV_BASE_POWER),)
    return NetworkModel(11, branches, MV_BASE_POWER, MV_BASE_VOLTAGE, name="mv",
                        tracking_weight=tracking_weight, resources=res)


def cigre_lv(name: str, host: int, tracking_weight: float = CIGRE_LV_TRACKING_WEIGHT) -> NetworkModel:
    zb = _lv_zbase()
    branches = []
    for f, t, km, kind in LV_LINES:
        r, x, amp = LV_CABLES[kind]
        branches.append(Branch(f - 1, t - 1, LV_IMPEDANCE_SCALE * complex(r * km, x * km) / zb, 0j, amp))
    res = (_bess("bess_lv", 14, 250e3, 500e3, LV_BASE_POWER),)
    return NetworkModel(18, tuple(branches), LV_BASE_POWER, LV_BASE_VOLTAGE, name=name, pcc_bus=host - 1,
                        tracking_weight=tracking_weight, resources=res)


def cigre_synth_spec(n_scenarios: int = 7, horizon: int = 96, step_seconds: float = 900.0,
                     pv_noise: float = 0.06, load_noise: float = 0.005) -> SynthSpec:
    q_r = np.tan(np.arccos(0.97))
    q_ci = np.tan(np.arccos(0.85))
    mv_loads = [(b - 1, s * 1e6 * 0.97 / MV_BASE_POWER, q_r) for b, s in MV_LOADS_R.items()]
    mv_loads += [(b - 1, s * 1e6 * 0.85 / MV_BASE_POWER, q_ci) for b, s in MV_LOADS_CI.items()]
    mv = GridProfile(11, tuple(mv_loads), ((2, 1.25e6 / MV_BASE_POWER),))
    q_lv = np.tan(np.arccos(0.95))
    lv_loads = tuple((b - 1, s * 0.95 / LV_BASE_POWER, q_lv) for b, s in LV_LOADS.items())
    lv = GridProfile(18, lv_loads, ((8, 100e3 / LV_BASE_POWER), (10, 50e3 / LV_BASE_POWER)))
    grids = {"mv": mv, "lv1": lv, "lv2": lv}
    return SynthSpec(grids, n_scenarios, horizon, step_seconds, load_noise, pv_noise)


def cigre_system(n_scenarios: int = 7, horizon: int = 96, seed: int = 7, **kw):
    """``(mv, [lv1, lv2], scenarios)`` of the CIGRE-like system."""
    mv = cigre_mv()
    lvs = [cigre_lv(f"lv{k + 1}", h) for k, h in enumerate(CIGRE_LV_HOSTS)]
    spec = cigre_synth_spec(n_scenarios, horizon, **kw)
    return mv, lvs, synthesize_scenarios(spec, seed)


# --- toy -------------------------------------------------------------------------

def toy_mv() -> NetworkModel:
    zb = _mv_zbase()
    branches = (Branch(0, 1, complex(1.5, 2.1) / zb), Branch(1, 2, complex(1.0, 1.4) / zb))
    res = (_bess("bess_mv", 1, 0.5e6, 1.0e6, MV_BASE_POWER),)
    return NetworkModel(3, branches, MV_BASE_POWER, MV_BASE_VOLTAGE, name="mv", resources=res)


def toy_lv(name: str, host: int) -> NetworkModel:
    zb = _lv_zbase()
    res = (_bess("bess_lv", 1, 60e3, 120e3, LV_BASE_POWER),)
    return NetworkModel(2, (Branch(0, 1, complex(0.0162, 0.0083) / zb, 0j, 1.0),), LV_BASE_POWER,
                        LV_BASE_VOLTAGE, name=name, pcc_bus=host, tracking_weight=1.0, resources=res)


def toy_synth_spec() -> SynthSpec:
    mv = GridProfile(3, ((1, 1.2e6 / MV_BASE_POWER, 0.3), (2, 0.8e6 / MV_BASE_POWER, 0.25)),
                     ((2, 1.0e6 / MV_BASE_POWER),))
    lv = GridProfile(2, ((1, 80e3 / LV_BASE_POWER, 0.3),), ((1, 60e3 / LV_BASE_POWER),))
    return SynthSpec({"mv": mv, "lv1": lv, "lv2": lv}, n_scenarios=2, horizon=8, step_seconds=10800.0,
                     load_noise=0.05, pv_noise=0.3)


def toy_system(seed: int = 1):
    mv = toy_mv()
    lvs = [toy_lv("lv1", 1), toy_lv("lv2", 2)]
    return mv, lvs, synthesize_scenarios(toy_synth_spec(), seed)


def write_fixture(kind: str, directory) -> dict:
    """Write grid files and a synth spec for ``kind`` ('toy' or 'cigre'); returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if kind == "toy":
        mv, lvs, spec = toy_mv(), [toy_lv("lv1", 1), toy_lv("lv2", 2)], toy_synth_spec()
    elif kind == "cigre":
        mv = cigre_mv()
        lvs = [cigre_lv(f"lv{k + 1}", h) for k, h in enumerate(CIGRE_LV_HOSTS)]
        spec = cigre_synth_spec()
    else:
        raise ValueError(f"unknown fixture {kind!r}")
    paths = {"mv": directory / "mv.json", "lv": [], "synth": directory / "synth.json"}
    paths["mv"].write_text(json.dumps(model_to_dict(mv), indent=2) + "\n")
    for lv in lvs:
        p = directory / f"{lv.name}.json"
        p.write_text(json.dumps(model_to_dict(lv), indent=2) + "\n")
        paths["lv"].append(p)
    paths["synth"].write_text(json.dumps(synth_spec_to_dict(spec), indent=2) + "\n")
    return paths
