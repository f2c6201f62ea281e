"""Run modes, dispatch metrics and on-disk artifacts."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .admm import AdmmConfig, AdmmResult, LvAgent, MvccrAgent, audit_privacy, read_trace, run_admm
from .errors import DegeneratePlanError, DimensionMismatch, MaxIterExceeded, SolverFailure
from .problems import (DEFAULT_NU, DispatchPlan, SystemData, build_centralized, build_lv_standalone,
                       build_mv_standalone, extract_dispatch_plan, grid_outcome, write_plan_csv)
from .qp import OPTIMAL, QpSettings, solve

MODES = ("centralized", "admm", "baseline")


# --- metrics -----------------------------------------------------------------------

def _check(plan_p, realized):
    plan_p = np.asarray(plan_p, float)
    realized = np.atleast_2d(np.asarray(realized, float))
    if plan_p.ndim != 1 or realized.shape[1] != plan_p.size:
        raise DimensionMismatch(f"plan of length {plan_p.size} vs realizations {realized.shape}")
    return plan_p, realized


def compute_mae(plan_p, realized, base_power: float = 1.0) -> float:
    """Largest |plan - realization| over scenarios and steps, in kW."""
    plan_p, realized = _check(plan_p, realized)
    return float(np.max(np.abs(realized - plan_p))) * base_power / 1e3


def compute_nsad(plan_p, realized) -> float:
    """Sum of absolute deviations over scenarios and steps, normalised by the
    plan's absolute energy over the same set, in percent."""
    plan_p, realized = _check(plan_p, realized)
    den = realized.shape[0] * float(np.sum(np.abs(plan_p)))
    if den == 0.0:
        raise DegeneratePlanError("NSAD undefined for an all-zero dispatch plan")
    return float(np.sum(np.abs(realized - plan_p))) / den * 100.0


# --- outcomes ------------------------------------------------------------------------

@dataclass
class RunOutcome:
    """What a run produced, on each grid's own per-unit base."""

    mode: str
    plan: DispatchPlan
    realized: dict  # grid -> P0 (W, T)
    bess: dict  # "grid.resource" -> {"p", "q", "soc"} each (W, T+?) arrays
    objective: float
    admm: AdmmResult | None = None
    timings: dict = field(default_factory=dict)


def _require(sol, who):
    if sol.status != OPTIMAL:
        raise SolverFailure(f"QP {sol.status}", sol, who)
    return sol


def run_centralized(system: SystemData, nu: float = DEFAULT_NU, settings: QpSettings | None = None) -> RunOutcome:
    t0 = time.perf_counter()
    prob = build_centralized(system, nu)
    sol = _require(solve(prob, settings=settings), "centralized")
    plan = extract_dispatch_plan(prob, sol, system)
    realized, bess = {}, {}
    for g in (system.mv,) + system.lvs:
        out = grid_outcome(prob, sol.x, g.name, g.resources)
        realized[g.name] = out.P0
        bess.update({f"{g.name}.{k}": v for k, v in out.bess.items()})
    return RunOutcome("centralized", plan, realized, bess, float(sol.objective),
                      timings={"total": time.perf_counter() - t0})


def run_baseline(system: SystemData, nu: float = DEFAULT_NU, settings: QpSettings | None = None) -> RunOutcome:
    """LV grids dispatch on their own; their PCC flows then enter the MV
    problem as fixed, uncontrollable injections."""
    t0 = time.perf_counter()
    realized, bess, sources, imports = {}, {}, {}, {}
    objective = 0.0
    for g in system.lvs:
        prob = build_lv_standalone(system, g.name, nu)
        sol = _require(solve(prob, settings=settings), g.name)
        out = grid_outcome(prob, sol.x, g.name, g.resources)
        sources[g.name] = (prob, sol)
        imports[g.name] = (out.P0, out.Q0)
        realized[g.name] = out.P0
        bess.update({f"{g.name}.{k}": v for k, v in out.bess.items()})
        objective += sol.objective
    prob = build_mv_standalone(system, imports, nu)
    sol = _require(solve(prob, settings=settings), system.mv.name)
    out = grid_outcome(prob, sol.x, system.mv.name, system.mv.resources)
    realized[system.mv.name] = out.P0
    bess.update({f"{system.mv.name}.{k}": v for k, v in out.bess.items()})
    plan = extract_dispatch_plan(prob, sol, system, lv_sources=sources)
    return RunOutcome("baseline", plan, realized, bess, objective + float(sol.objective),
                      timings={"total": time.perf_counter() - t0})


def admm_outcome(system: SystemData, result: AdmmResult) -> RunOutcome:
    realized, bess = {}, {}
    mv = system.mv
    agg = result.aggregator
    # agents' actual set-points, not the aggregator's copies
    realized[mv.name] = agg.import_at(result.state.originals)
    for agent in result.agents.values():
        x = agent.solution.x
        if isinstance(agent, LvAgent):
            g = system.lv(agent.name)
            out = grid_outcome(agent.problem, x, g.name, g.resources)
            realized[g.name] = out.P0
            bess.update({f"{g.name}.{k}": v for k, v in out.bess.items()})
        elif isinstance(agent, MvccrAgent):
            res = [r for r in mv.resources if r.name == agent.name]
            out = grid_outcome(agent.problem, x, mv.name, res)
            bess.update({f"{mv.name}.{k}": v for k, v in out.bess.items()})
    return RunOutcome("admm", result.plan, realized, dict(sorted(bess.items())), result.objective, result,
                      timings=dict(result.timings))


def run_admm_mode(system: SystemData, config: AdmmConfig | None = None) -> RunOutcome:
    return admm_outcome(system, run_admm(system, config))


# --- reporting -------------------------------------------------------------------------

def metrics(outcome: RunOutcome, system: SystemData) -> dict:
    """Flat metrics mapping (kW and percent); deterministic for a given run."""
    out = {"mode": outcome.mode}
    mv = system.mv
    out["mv.mae_kw"] = compute_mae(outcome.plan.p_disp, outcome.realized[mv.name], mv.model.base_power)
    out["mv.nsad_pct"] = compute_nsad(outcome.plan.p_disp, outcome.realized[mv.name])
    for g in system.lvs:
        p = outcome.plan.lv[g.name][0]
        out[f"lv.{g.name}.mae_kw"] = compute_mae(p, outcome.realized[g.name], g.model.base_power)
        out[f"lv.{g.name}.nsad_pct"] = compute_nsad(p, outcome.realized[g.name])
    out["objective"] = outcome.objective
    if outcome.admm is not None:
        last = outcome.admm.state.history[-1]
        out["admm.iterations"] = outcome.admm.iterations
        out["admm.s_pri_final"] = last.s_pri
        out["admm.s_dual_final"] = last.s_dual
        out["admm.converged"] = outcome.admm.converged
    return out


def _bases(system):
    return {g.name: g.model.base_power for g in (system.mv,) + system.lvs}


def write_plot_data(outcome: RunOutcome, system: SystemData, directory) -> list:
    """Long-format CSVs: slack power vs plan per scenario, and BESS P/SOC per scenario."""
    directory = Path(directory)
    bases = _bases(system)
    plans = {name: p for name, p, _, _ in outcome.plan.grids()}
    paths = []
    for name, real in outcome.realized.items():
        path = directory / f"plot_power_{name}.csv"
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["scenario", "t", "plan_kw", "power_kw"])
            for w in range(real.shape[0]):
                for t in range(real.shape[1]):
                    wr.writerow([w, t, repr(float(plans[name][t] * bases[name] / 1e3)),
                                 repr(float(real[w, t] * bases[name] / 1e3))])
        paths.append(path)
    for key, vals in outcome.bess.items():
        base = bases[key.split(".", 1)[0]]
        path = directory / f"plot_bess_{key}.csv"
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["scenario", "t", "p_kw", "q_kvar", "soc"])
            p, q, soc = vals["p"], vals["q"], vals["soc"]
            for w in range(p.shape[0]):
                for t in range(p.shape[1]):
                    wr.writerow([w, t, repr(float(p[w, t] * base / 1e3)), repr(float(q[w, t] * base / 1e3)),
                                 repr(float(soc[w, t]))])
        paths.append(path)
    return paths


def write_artifacts(outcome: RunOutcome, system: SystemData, directory) -> dict:
    """Plans, metrics, plot data and (ADMM) trace plus privacy audit."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"plans": write_plan_csv(outcome.plan, directory)}
    m = metrics(outcome, system)
    if outcome.admm is not None:
        trace_path = directory / "trace.ndjson"
        outcome.admm.write_trace(trace_path)
        files["trace"] = trace_path
        report = audit_privacy(read_trace(outcome.admm.trace))
        m["privacy_audit"] = "PASS" if report.passed else "FAIL"
        (directory / "privacy_audit.json").write_text(json.dumps(
            {"passed": report.passed, "leaks": report.leaks, "messages": report.messages,
             "expected_messages": report.expected_messages, "iterations": report.iterations},
            indent=2, sort_keys=True) + "\n")
    files["metrics"] = directory / "metrics.json"
    files["metrics"].write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    # wall-clock numbers vary between runs; keep them out of metrics.json
    (directory / "timings.json").write_text(json.dumps(outcome.timings, indent=2, sort_keys=True) + "\n")
    files["plots"] = write_plot_data(outcome, system, directory)
    files["metrics_dict"] = m
    return files


def run_mode(mode: str, system: SystemData, nu: float = DEFAULT_NU, admm_config: AdmmConfig | None = None,
             settings: QpSettings | None = None) -> RunOutcome:
    if mode == "centralized":
        return run_centralized(system, nu, settings)
    if mode == "baseline":
        return run_baseline(system, nu, settings)
    if mode == "admm":
        cfg = admm_config or AdmmConfig(nu=nu, qp=settings)
        try:
            return run_admm_mode(system, cfg)
        except MaxIterExceeded as exc:
            exc.outcome = admm_outcome(system, exc.result) if exc.result is not None else None
            raise
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
