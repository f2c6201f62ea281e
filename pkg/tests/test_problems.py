import numpy as np
import pytest

from mgdispatch.errors import SolverFailure, ValidationError
from mgdispatch.network import Branch, NetworkModel, solve_ac_power_flow
from mgdispatch.problems import (DEFAULT_NU, aggregator_subproblem, build_aggregator_problem, build_centralized,
                                 build_lv_standalone, build_lv_subproblem, build_mv_standalone,
                                 build_mvccr_subproblem, extract_dispatch_plan, grid_outcome, linearize_system,
                                 lv_subproblem, mvccr_subproblem, read_plan_csv, write_plan_csv)
from mgdispatch.qp import OPTIMAL, QpSolution, solve, validate
from mgdispatch.scenarios import ScenarioSet

from oracles import soc_recursion

MV_BASE = 12e6


def bess(name, node, s_max, e_max, soc=0.5, a=0.1):
    return {"type": "bess", "name": name, "node": node, "s_max_pu": s_max, "e_max_wh": e_max,
            "soc_init": soc, "margin_a": a}


def scenario_set(p, q=None, gcp=None, step=900.0):
    """``p``: grid -> (W, n_bus, T)."""
    q = q or {g: np.zeros_like(a) for g, a in p.items()}
    first = next(iter(p.values()))
    n_w, _, n_t = first.shape
    gcp = np.ones((n_w, n_t)) if gcp is None else gcp
    return ScenarioSet(tuple(range(n_w)), gcp, p, q, step)


def mv_chain(n, z, resources=(), **kw):
    branches = tuple(Branch(k, k + 1, z) for k in range(n - 1))
    return NetworkModel(n, branches, MV_BASE, 20e3, resources=tuple(resources), **kw)


def lv_two_bus(name, host, resources=()):
    return NetworkModel(2, (Branch(0, 1, 0.02 + 0.01j, 0j, 2.0),), 400e3, 400.0, name=name, pcc_bus=host,
                        resources=tuple(resources))


# --- centralized -------------------------------------------------------------------

def test_single_scenario_tracks_exactly():
    mv = mv_chain(3, 0.01 + 0.02j)
    p = np.zeros((1, 3, 4))
    p[0, 1] = [-0.1, -0.2, -0.15, -0.05]
    p[0, 2] = [-0.05, 0.02, -0.1, -0.08]
    sys_ = linearize_system(mv, [], scenario_set({"mv": p}))
    prob = build_centralized(sys_)
    sol = solve(prob)
    out = grid_outcome(prob, sol.x, "mv")
    ac = [solve_ac_power_flow(mv, p[0, 1:, t] + 0j).slack_injection.real for t in range(4)]
    assert np.allclose(out.p_disp, ac, atol=1e-7)
    assert np.allclose(out.P0[0], ac, atol=1e-7)
    assert sol.objective == pytest.approx(DEFAULT_NU * np.sum(np.square(ac)), rel=1e-6)


def test_symmetric_scenarios_least_squares():
    L, d, nu = 0.1, 0.02, DEFAULT_NU
    mv = mv_chain(2, 0.01j, [bess("b", 1, d, 1e12)])  # reactive line: no active losses
    p = np.zeros((2, 2, 1))
    p[0, 1], p[1, 1] = -L + d, -L - d
    sys_ = linearize_system(mv, [], scenario_set({"mv": p}))
    prob = build_centralized(sys_, nu)
    sol = solve(prob)
    out = grid_outcome(prob, sol.x, "mv", sys_.mv.resources)
    # high-load scenario is pinned at L by the rating; the other trades tracking against nu
    x = L / (1 + 2 * nu)
    assert out.P0[1, 0] == pytest.approx(L, abs=1e-7)
    assert out.P0[0, 0] == pytest.approx(x, abs=1e-7)
    assert out.p_disp[0] == pytest.approx((x + L) / 2, abs=1e-7)
    assert out.p_disp[0] == pytest.approx(L, rel=2 * nu)  # the scenario mean, up to O(nu)
    pb = out.bess["b"]["p"][:, 0]
    assert pb[1] == pytest.approx(d, abs=1e-7)
    assert pb[0] == pytest.approx(-d + (L - x), abs=1e-7)
    plan = extract_dispatch_plan(prob, sol, sys_)
    assert plan.p_disp[0] == out.p_disp[0]


def test_extract_refuses_non_optimal(toy):
    prob = build_centralized(toy)
    bad = QpSolution(np.zeros(prob.n), np.zeros(prob.m), np.zeros(prob.n), 0.0, "MaxIter", 10, 1.0)
    with pytest.raises(SolverFailure):
        extract_dispatch_plan(prob, bad, toy)


def test_zero_problem_zero_plan():
    mv = mv_chain(2, 0.01 + 0.01j)
    sys_ = linearize_system(mv, [], scenario_set({"mv": np.zeros((1, 2, 3))}))
    prob = build_centralized(sys_)
    plan = extract_dispatch_plan(prob, solve(prob), sys_)
    assert np.allclose(plan.p_disp, 0, atol=1e-9) and np.allclose(plan.q_disp, 0, atol=1e-9)


def test_plan_csv_roundtrip(tmp_path, toy):
    prob = build_centralized(toy)
    plan = extract_dispatch_plan(prob, solve(prob), toy)
    paths = write_plan_csv(plan, tmp_path)
    assert sorted(p.name for p in paths) == ["plan_lv1.csv", "plan_lv2.csv", "plan_mv.csv"]
    assert paths[0].read_text().splitlines()[0] == "t,p_disp_kw,q_disp_kvar"
    for name, p, q, base in plan.grids():
        p2, q2 = read_plan_csv(tmp_path / f"plan_{name}.csv", base)
        assert np.allclose(p2, p, rtol=1e-15, atol=0) and np.allclose(q2, q, rtol=1e-15, atol=0)
    assert plan.advertised == ("p",)


def test_split_is_exclusive_and_power_factor_holds(toy):
    prob = build_centralized(toy)
    sol = solve(prob)
    for g in (toy.mv,) + toy.lvs:
        out = grid_outcome(prob, sol.x, g.name)
        assert np.max(out.p_plus * out.p_minus) <= 1e-9
        P0 = out.p_plus - out.p_minus
        ratio = np.abs(P0) / np.hypot(P0, out.Q0)
        assert np.all(ratio >= g.model.cos_theta_min - 1e-6)


def test_named_row_audit(toy):
    prob = build_centralized(toy)
    names = set(prob.row_blocks)
    for g in ("mv", "lv1", "lv2"):
        for fam in ("balance_p", "balance_q", "pf_split", "pf_upper", "pf_lower", "voltage", "current"):
            assert f"{g}.{fam}" in names
    for lv in ("lv1", "lv2"):
        assert f"{lv}.pcc_voltage" in names
        assert f"{lv}.bess_lv.soc_recursion" in names
    assert "mv.bess_mv.soc_recursion" in names
    assert set(prob.disk_blocks) == {"mv.bess_mv.capability", "lv1.bess_lv.capability",
                                     "lv2.bess_lv.capability"}


def test_all_problems_convex(toy):
    zeros = {s: np.zeros(toy.shape) for s in ("p", "q", "v")}
    origs = {"lv:lv1": dict(zeros), "lv:lv2": dict(zeros), "mvccr:bess_mv": {"p": zeros["p"], "q": zeros["q"]}}
    probs = [build_centralized(toy), build_lv_subproblem(toy, "lv1", zeros, zeros, 1.0),
             build_mvccr_subproblem(toy, "bess_mv", zeros, zeros, 1.0),
             build_aggregator_problem(toy, origs, origs, 1.0), build_lv_standalone(toy, "lv1"),
             build_mv_standalone(toy, {g.name: (np.zeros(toy.shape),) * 2 for g in toy.lvs})]
    for prob in probs:
        assert validate(prob) == []


# --- subproblems -----------------------------------------------------------------

def test_rho_must_be_positive(toy):
    zeros = {s: np.zeros(toy.shape) for s in ("p", "q", "v")}
    for build in (lambda r: build_lv_subproblem(toy, "lv1", zeros, zeros, r),
                  lambda r: build_mvccr_subproblem(toy, "bess_mv", zeros, zeros, r),
                  lambda r: build_aggregator_problem(toy, {"lv:lv1": zeros}, {"lv:lv1": zeros}, r)):
        with pytest.raises(ValidationError):
            build(0.0)


def test_large_rho_pins_lv_to_copies(toy):
    lv = toy.lv("lv1")
    # a feasible boundary that is not the LV optimum
    alone = build_lv_standalone(toy, "lv1", nu=5.0)
    ref = grid_outcome(alone, solve(alone).x, "lv1")
    copies = {"p": lv.scale * ref.P0, "q": lv.scale * ref.Q0, "v": ref.v0}
    zeros = {s: np.zeros(toy.shape) for s in copies}
    gaps = []
    for rho in (10.0, 1e3):
        sub = lv_subproblem(toy, "lv1")
        sol = solve(build_lv_subproblem(toy, "lv1", copies, zeros, rho))
        gaps.append(max(np.max(np.abs(sub.value(sol.x, s) - copies[s])) for s in copies))
    assert gaps[1] < 1e-5 and gaps[1] < gaps[0] / 30, gaps


def test_lv_without_resources_plans_the_mean():
    mv = mv_chain(2, 0.01 + 0.02j)
    lv = lv_two_bus("lv", 1)
    p = {"mv": np.zeros((2, 2, 3)), "lv": np.zeros((2, 2, 3))}
    p["lv"][0, 1] = [-0.2, -0.3, -0.1]
    p["lv"][1, 1] = [-0.25, -0.1, -0.2]
    sys_ = linearize_system(mv, [lv], scenario_set(p))
    g = sys_.lv("lv")
    zeros = {s: np.zeros(sys_.shape) for s in ("p", "q", "v")}
    copies = dict(zeros, v=g.slack_ref.copy())
    prob = build_lv_subproblem(sys_, "lv", copies, zeros, 1.0)
    out = grid_outcome(prob, solve(prob).x, "lv")
    p0 = -g.p_unc + g.b_d[:, :, 0]
    assert np.allclose(out.P0, p0, atol=1e-8)
    assert np.allclose(out.p_disp, p0.mean(axis=0), atol=1e-8)


@pytest.fixture
def one_bess_system():
    mv = mv_chain(2, 0.01 + 0.02j, [bess("b", 1, 0.05, 2e6, soc=0.5, a=0.1)])
    sys_ = linearize_system(mv, [], scenario_set({"mv": np.zeros((1, 2, 8))}))
    return sys_


def test_mvccr_interior_copies_returned(one_bess_system):
    rng = np.random.default_rng(0)
    shape = one_bess_system.shape
    copies = {"p": rng.uniform(-0.01, 0.01, shape), "q": rng.uniform(-0.01, 0.01, shape)}
    zeros = {s: np.zeros(shape) for s in copies}
    sub = mvccr_subproblem(one_bess_system, "b")
    for rho in (1.0, 2.0):
        sol = solve(build_mvccr_subproblem(one_bess_system, "b", copies, zeros, rho))
        for s in copies:
            assert np.allclose(sub.value(sol.x, s), copies[s], atol=1e-7)


def test_mvccr_saturates_on_reservoir(one_bess_system):
    shape = one_bess_system.shape
    params = one_bess_system.mv.resources[0]
    copies = {"p": np.full(shape, params.s_max), "q": np.zeros(shape)}
    zeros = {s: np.zeros(shape) for s in copies}
    sub = mvccr_subproblem(one_bess_system, "b")
    sol = solve(build_mvccr_subproblem(one_bess_system, "b", copies, zeros, 1.0))
    p = sub.value(sol.x, "p")[0]
    gain = params.soc_gain(900.0, MV_BASE)
    soc = soc_recursion(params.soc_init, p, gain)
    # the budget (soc_init - a) / gain is spread evenly: the projection of a constant
    budget = (params.soc_init - params.soc_min) / gain
    assert budget < params.s_max * shape[1]
    assert np.allclose(p, budget / shape[1], atol=1e-7)
    assert soc[-1] == pytest.approx(params.soc_min, abs=1e-7)


def _single_lv_system(v_min=0.9):
    mv = mv_chain(3, 0.01 + 0.02j, v_min=v_min)
    lv = lv_two_bus("lv", 2)
    p = {"mv": np.zeros((1, 3, 2)), "lv": np.zeros((1, 2, 2))}
    p["mv"][0, 2] = [-0.1, -0.2]
    p["lv"][0, 1] = [-0.5, -0.4]
    return linearize_system(mv, [lv], scenario_set(p))


def test_aggregator_copies_follow_originals():
    sys_ = _single_lv_system()
    g = sys_.lv("lv")
    p0 = g.scale * (-g.p_unc + g.b_d[:, :, 0])
    q0 = g.scale * (-g.q_unc + g.b_d[:, :, 1])
    origs = {"lv:lv": {"p": p0, "q": q0, "v": g.slack_ref.copy()}}
    zeros = {"lv:lv": {s: np.zeros(sys_.shape) for s in ("p", "q", "v")}}
    agg = aggregator_subproblem(sys_, nu=0.0)
    prob = build_aggregator_problem(sys_, origs, zeros, 1.0, nu=0.0)
    sol = solve(prob)
    for s in ("p", "q"):
        assert np.allclose(-agg.value(sol.x, f"lv:lv:{s}"), origs["lv:lv"][s], atol=1e-7)
    out = grid_outcome(prob, sol.x, "mv")
    assert np.allclose(out.p_disp, out.P0[0], atol=1e-8)
    # the copied PCC voltage is the MV model's voltage at the hosting bus
    assert np.allclose(-agg.value(sol.x, "lv:lv:v"), g.slack_ref, atol=2e-4)


def test_aggregator_voltage_bound_clips_copy():
    free = _single_lv_system()
    v_nc = free.lv("lv").slack_ref[0]  # host bus 2 is the far end of the chain
    sys_ = _single_lv_system(v_min=float(v_nc.min()) + 0.002)
    g = sys_.lv("lv")
    origs = {"lv:lv": {"p": g.scale * (-g.p_unc + g.b_d[:, :, 0]), "q": g.scale * (-g.q_unc + g.b_d[:, :, 1]),
                       "v": g.slack_ref.copy()}}
    zeros = {"lv:lv": {s: np.zeros(sys_.shape) for s in ("p", "q", "v")}}
    agg = aggregator_subproblem(sys_)
    sol = solve(build_aggregator_problem(sys_, origs, zeros, 1.0))
    assert sol.status == OPTIMAL
    v_copy = -agg.value(sol.x, "lv:lv:v")[0]
    t = int(np.argmin(v_nc))
    assert v_copy[t] == pytest.approx(sys_.mv.model.v_min, abs=1e-7)
    # the next dual update carries the gap back to the LV agent
    assert origs["lv:lv"]["v"][0, t] - v_copy[t] < -1e-3


def test_decomposition_consistency(toy):
    cen = build_centralized(toy)
    x = solve(cen).x
    total = 0.0
    subs = {f"lv:{g.name}": lv_subproblem(toy, g.name) for g in toy.lvs}
    subs.update({f"mvccr:{r.name}": mvccr_subproblem(toy, r.name) for r in toy.mvccrs})
    agg = aggregator_subproblem(toy)
    copy_src = {}
    for agent, sub in subs.items():
        xs = np.zeros(sub.base.n)
        for name, cols in sub.base.var_blocks.items():
            xs[cols] = x[cen.var_blocks[name]]
        vals = {s: sub.value(xs, s) for s in sub.coupling}
        copy_src.update({f"{agent}:{s}": v for s, v in vals.items()})
        # copies = originals, duals zero: the penalty vanishes
        total += sub.penalized({s: -v for s, v in vals.items()}, 1.0).objective(xs)
    xa = np.zeros(agg.base.n)
    for name, cols in agg.base.var_blocks.items():
        if name in cen.var_blocks:
            xa[cols] = x[cen.var_blocks[name]]
    for key, (cols, _) in agg.coupling.items():
        xa[cols] = copy_src[key]
    total += agg.penalized(copy_src, 1.0).objective(xa)
    assert total == pytest.approx(cen.objective(x), rel=1e-8, abs=1e-8)
