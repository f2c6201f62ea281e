import json

import numpy as np
import pytest

from mgdispatch.cli import EXIT_INVALID, EXIT_OK, EXIT_SOLVER, main
from mgdispatch.network import save_grid
from mgdispatch.problems import DEFAULT_NU
from mgdispatch.scenarios import save_scenarios

from test_problems import MV_BASE, bess, mv_chain, scenario_set


@pytest.fixture(scope="module")
def toy_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert main(["fixture", "toy", "--out", str(d)]) == EXIT_OK
    return d


def run(files, out, *extra, mode="admm"):
    argv = ["run", "--mode", mode, "--mv", str(files / "mv.json"), "--lv", str(files / "lv1.json"),
            str(files / "lv2.json"), "--synth", str(files / "synth.json"), "--seed", "7", "--out", str(out)]
    return main(argv + list(extra))


def test_centralized_metrics_match_least_squares(tmp_path, capsys):
    L, d = 0.1, 0.02
    mv = mv_chain(2, 0.01j, [bess("b", 1, d, 1e12)])
    p = np.zeros((2, 2, 1))
    p[0, 1], p[1, 1] = -L + d, -L - d
    save_grid(mv, tmp_path / "mv.json")
    save_scenarios(scenario_set({"mv": p}), tmp_path / "sc.json")
    code = main(["run", "--mode", "centralized", "--mv", str(tmp_path / "mv.json"), "--scenarios",
                 str(tmp_path / "sc.json"), "--out", str(tmp_path / "out")])
    assert code == EXIT_OK
    m = json.loads((tmp_path / "out" / "metrics.json").read_text())
    x = L / (1 + 2 * DEFAULT_NU)
    assert m["mv.mae_kw"] == pytest.approx((L - x) / 2 * MV_BASE / 1e3, abs=1e-3)
    assert m["mv.nsad_pct"] == pytest.approx((L - x) / (L + x) * 100, abs=1e-4)
    assert "mv.mae_kw:" in capsys.readouterr().out


def test_admm_twice_is_byte_identical(tmp_path, toy_files):
    assert run(toy_files, tmp_path / "a") == EXIT_OK
    assert run(toy_files, tmp_path / "b") == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        if name != "timings.json":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    m = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert {"mv.mae_kw", "mv.nsad_pct", "lv.lv1.mae_kw", "lv.lv2.nsad_pct", "admm.iterations",
            "admm.s_pri_final", "admm.s_dual_final"} <= set(m)


def test_max_iter_exit_code_keeps_artifacts(tmp_path, toy_files):
    assert run(toy_files, tmp_path / "o", "--max-iter", "2") == EXIT_SOLVER
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["admm.iterations"] == 2


def test_invalid_inputs(tmp_path, toy_files, capsys):
    assert main(["run", "--mode", "centralized", "--mv", str(tmp_path / "nope.json"), "--synth",
                 str(toy_files / "synth.json"), "--out", str(tmp_path)]) == EXIT_INVALID
    assert "nope.json" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run(toy_files, tmp_path / "x", mode="baseline") == EXIT_OK
    code = main(["run", "--mode", "centralized", "--mv", str(toy_files / "mv.json"), "--synth", str(bad),
                 "--out", str(tmp_path / "y")])
    assert code == EXIT_INVALID
    assert run(toy_files, tmp_path / "z", "--rho0", "0") == EXIT_INVALID


def test_infeasible_power_factor_is_solver_failure(tmp_path, toy_files, capsys):
    # unity power factor cannot be met with reactive loads and no reactive resource at every grid
    code = run(toy_files, tmp_path / "o", "--cos-theta-min", "1.0", mode="baseline")
    assert code == EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err
