import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgdispatch.errors import DimensionMismatch, SchemaError
from mgdispatch.fixtures import cigre_lv, cigre_mv, cigre_synth_spec, toy_synth_spec
from mgdispatch.scenarios import (GridProfile, SynthSpec, load_scenarios, point_forecast, save_scenarios,
                                  scenarios_to_dict, synth_spec_from_dict, synth_spec_to_dict,
                                  synthesize_scenarios)


@pytest.fixture(scope="module")
def cigre_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("sc") / "scenarios.json"
    save_scenarios(synthesize_scenarios(cigre_synth_spec(), 7), path)
    return path


def test_load_seven_by_ninety_six(cigre_file):
    grids = [cigre_mv(), cigre_lv("lv1", 5), cigre_lv("lv2", 6)]
    sset = load_scenarios(cigre_file, grids)
    assert sset.n_scenarios == 7 and sset.horizon == 96 and sset.step_seconds == 900.0
    doc = json.loads(cigre_file.read_text())
    assert set(doc["scenarios"][0]) == {"id", "gcp_voltage_mag", "grids"}
    assert set(doc["scenarios"][0]["grids"]["mv"]) == {"p_unc", "q_unc"}


def test_empty_scenario_list(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(json.dumps({"step_seconds": 900, "scenarios": []}))
    with pytest.raises(SchemaError):
        load_scenarios(path)


def test_bus_count_mismatch_names_grid(cigre_file):
    short = dataclasses.replace(cigre_lv("lv2", 6), n_buses=17,
                                branches=cigre_lv("lv2", 6).branches[:16], resources=())
    with pytest.raises(DimensionMismatch, match="lv2"):
        load_scenarios(cigre_file, [cigre_mv(), cigre_lv("lv1", 5), short])


def test_ragged_steps_rejected(cigre_file, tmp_path):
    doc = json.loads(cigre_file.read_text())
    doc["scenarios"][3]["gcp_voltage_mag"].pop()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(DimensionMismatch, match="scenario 3"):
        load_scenarios(bad)


def test_seed_determinism():
    a = synthesize_scenarios(cigre_synth_spec(), 11)
    b = synthesize_scenarios(cigre_synth_spec(), 11)
    assert json.dumps(scenarios_to_dict(a)) == json.dumps(scenarios_to_dict(b))
    c = synthesize_scenarios(cigre_synth_spec(), 12)
    assert not np.array_equal(a.p_unc["mv"], c.p_unc["mv"])


def test_zero_noise_gives_identical_scenarios():
    spec = dataclasses.replace(cigre_synth_spec(), load_noise=0.0, pv_noise=0.0)
    sset = synthesize_scenarios(spec, 3)
    for g in sset.grid_names:
        assert np.all(sset.p_unc[g] == sset.p_unc[g][:1])
        assert np.all(sset.q_unc[g] == sset.q_unc[g][:1])


def test_gcp_voltage_mean():
    spec = SynthSpec({"g": GridProfile(2)}, n_scenarios=100, horizon=100)
    v = synthesize_scenarios(spec, 0).gcp_voltage
    assert v.size == 10_000
    assert abs(v.mean() - 1.0) <= 0.002


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**63 - 1))
def test_bounds_and_signs(seed):
    sset = synthesize_scenarios(toy_synth_spec(), seed)
    assert sset.gcp_voltage.min() >= 0.98 and sset.gcp_voltage.max() <= 1.02
    # bus 1 of the MV toy carries only load, bus 2 load and PV
    assert np.all(sset.p_unc["mv"][:, 1] <= 0)
    assert np.all(sset.q_unc["mv"] <= 0)


def test_synth_spec_roundtrip():
    spec = toy_synth_spec()
    assert synth_spec_from_dict(json.loads(json.dumps(synth_spec_to_dict(spec)))) == spec


def test_point_forecast_is_mean():
    sset = synthesize_scenarios(toy_synth_spec(), 1)
    pf = point_forecast(sset)
    assert pf.n_scenarios == 1
    assert np.allclose(pf.p_unc["lv1"][0], sset.p_unc["lv1"].mean(axis=0))
