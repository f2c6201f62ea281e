"""Scaled-form ADMM between LV agents, MV resource agents and the MV aggregator.

Each iteration:

1. every agent solves its local problem given the aggregator's copies and
   the scaled duals, and reports its boundary originals;
2. the aggregator solves the MV problem for the copies;
3. duals are updated ``u <- u + original - copy``;
4. residuals are checked and the penalty adapted.

All agent traffic goes through :class:`AgentMessage` values serialized to
JSON, which also form the newline-delimited trace. Agents never see each
other's models; the aggregator only sees boundary series.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import AgentFailure, MaxIterExceeded, SolverFailure, ValidationError
from .problems import (DEFAULT_NU, LV_SYMBOLS, MVCCR_SYMBOLS, DispatchPlan, SystemData, aggregator_offsets,
                       aggregator_subproblem, lv_subproblem, mvccr_subproblem)
from .qp import OPTIMAL, QpCache, QpSettings

AGGREGATOR = "aggregator"
ORIGINALS = "originals"
COPIES_AND_DUALS = "copies_and_duals"
CONVERGED = "converged"


@dataclass(frozen=True)
class AdmmConfig:
    rho0: float = 1.0
    mu: float = 10.0
    tau_inc: float = 2.0
    tau_dec: float = 2.0
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    max_iter: int = 500
    nu: float = DEFAULT_NU
    adaptive_rho: bool = True
    zero_start: bool = False
    # the textbook dual residual carries a factor rho; off by default
    scaled_dual_residual: bool = False
    workers: int = 1
    qp: QpSettings | None = None

    def __post_init__(self):
        if not self.rho0 > 0:
            raise ValidationError("rho0 must be > 0")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not (self.mu > 1 and self.tau_inc >= 1 and self.tau_dec >= 1):
            raise ValidationError("need mu > 1 and tau_inc, tau_dec >= 1")
        if self.eps_abs < 0 or self.eps_rel < 0:
            raise ValidationError("tolerances must be >= 0")
        if self.nu < 0:
            raise ValidationError("nu must be >= 0")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("rho0", "mu", "tau_inc", "tau_dec", "eps_abs", "eps_rel",
                                              "max_iter", "nu", "adaptive_rho", "zero_start",
                                              "scaled_dual_residual")}


# --- messages -----------------------------------------------------------------------

def _encode(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


@dataclass(frozen=True)
class AgentMessage:
    """``kind`` is ``originals`` (agent -> aggregator), ``copies_and_duals`` or
    ``converged`` (aggregator -> agents, one broadcast per iteration)."""

    sender: str
    iteration: int
    kind: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"record": "message", "sender": self.sender, "iteration": self.iteration,
                           "kind": self.kind, "payload": _encode(self.payload)}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AgentMessage":
        doc = json.loads(text)
        return cls.from_record(doc)

    @classmethod
    def from_record(cls, doc: dict) -> "AgentMessage":
        return cls(doc["sender"], int(doc["iteration"]), doc["kind"], doc["payload"])

    def series(self, *path) -> np.ndarray:
        node = self.payload
        for key in path:
            node = node[key]
        return np.asarray(node, dtype=float)


# --- agents ---------------------------------------------------------------------------

class _Agent:
    symbols: tuple = ()

    def __init__(self, sender: str, sub, qp_settings):
        self.sender = sender
        self._sub = sub
        self._cache = QpCache(qp_settings)
        self.problem = None
        self.solution = None

    def _originals(self, x) -> dict:
        return {s: self._sub.value(x, s) for s in self.symbols}

    def step(self, msg: AgentMessage) -> AgentMessage:
        """Local update from the aggregator's broadcast; returns the originals."""
        k = msg.iteration + 1
        mine = msg.payload["agents"][self.sender]
        copies = {s: np.asarray(mine["copy"][s], float) for s in self.symbols}
        duals = {s: np.asarray(mine["dual"][s], float) for s in self.symbols}
        offsets = {s: duals[s] - copies[s] for s in self.symbols}
        try:
            self.problem = self._sub.penalized(offsets, float(msg.payload["rho"]))
            self.solution = self._cache.solve(self.problem)
        except Exception as exc:  # surfaced with agent context
            raise AgentFailure(self.sender, k, exc) from exc
        if self.solution.status != OPTIMAL:
            raise AgentFailure(self.sender, k, SolverFailure(f"local QP {self.solution.status}",
                                                             self.solution, self.sender))
        return AgentMessage(self.sender, k, ORIGINALS, self._originals(self.solution.x))

    def local_objective(self) -> float:
        """Objective without the consensus penalty at the latest local solution."""
        return float(self._sub.base.objective(self.solution.x))


class LvAgent(_Agent):
    """Owns one LV grid; reports PCC power (MV per unit) and PCC voltage."""

    symbols = LV_SYMBOLS

    def __init__(self, system: SystemData, name: str, nu: float = DEFAULT_NU, qp_settings=None):
        super().__init__(f"lv:{name}", lv_subproblem(system, name, nu), qp_settings)
        self.name = name
        self._grid = system.lv(name)

    def initial(self, zero: bool = False) -> AgentMessage:
        g = self._grid
        if zero:
            vals = {s: np.zeros(g.shape) for s in self.symbols}
        else:
            # no-control operating point of every (scenario, step)
            vals = {"p": g.scale * (g.b_d[:, :, 0] - g.p_unc), "q": g.scale * (g.b_d[:, :, 1] - g.q_unc),
                    "v": g.slack_ref.copy()}
        return AgentMessage(self.sender, 0, ORIGINALS, vals)

    def plan(self):
        x = self.solution.x
        p = self.problem
        return (p.value(x, f"{self.name}.p_disp").copy(), p.value(x, f"{self.name}.q_disp").copy(),
                self._grid.model.base_power)


class MvccrAgent(_Agent):
    """One MV-connected resource; reports its P and Q set-points."""

    symbols = MVCCR_SYMBOLS

    def __init__(self, system: SystemData, name: str, qp_settings=None):
        super().__init__(f"mvccr:{name}", mvccr_subproblem(system, name), qp_settings)
        self.name = name
        self._shape = system.shape

    def initial(self, zero: bool = False) -> AgentMessage:
        return AgentMessage(self.sender, 0, ORIGINALS, {s: np.zeros(self._shape) for s in self.symbols})


class Aggregator:
    """MV grid operator: holds copies and scaled duals, never agent models."""

    def __init__(self, system: SystemData, nu: float = DEFAULT_NU, qp_settings=None):
        self._sub = aggregator_subproblem(system, nu)
        self._cache = QpCache(qp_settings)
        self._mv = system.mv
        self.problem = None
        self.solution = None

    def solve(self, originals: dict, duals: dict, rho: float, iteration: int) -> dict:
        try:
            self.problem = self._sub.penalized(aggregator_offsets(originals, duals), rho)
            self.solution = self._cache.solve(self.problem)
        except Exception as exc:
            raise AgentFailure(AGGREGATOR, iteration, exc) from exc
        if self.solution.status != OPTIMAL:
            raise AgentFailure(AGGREGATOR, iteration, SolverFailure(f"MV QP {self.solution.status}",
                                                                    self.solution, AGGREGATOR))
        x = self.solution.x
        copies = {}
        for agent, vals in originals.items():
            copies[agent] = {s: x[self._sub.coupling[f"{agent}:{s}"][0]] for s in vals}
        return copies

    def local_objective(self) -> float:
        return float(self._sub.base.objective(self.solution.x))

    def import_at(self, originals: dict) -> np.ndarray:
        """MV slack import (W, T) with the copies replaced by the agents' originals.

        Before consensus the aggregator's own import describes its copies;
        this is the flow the agents' actual set-points would produce.
        """
        prob, x = self.problem, self.solution.x
        dx = np.zeros_like(x)
        for agent, vals in originals.items():
            for s, v in vals.items():
                cols = self._sub.coupling[f"{agent}:{s}"][0]
                dx[cols] = np.asarray(v) - x[cols]
        rows = prob.rows(f"{self._mv.name}.balance_p")
        p0 = prob.value(x, f"{self._mv.name}.P0")
        return p0 - (prob.A[rows.ravel()] @ dx).reshape(p0.shape)

    def plan(self):
        x, p, name = self.solution.x, self.problem, self._mv.name
        return p.value(x, f"{name}.p_disp").copy(), p.value(x, f"{name}.q_disp").copy()


# --- residuals and penalty ------------------------------------------------------------

@dataclass(frozen=True)
class ResidualRecord:
    iteration: int
    s_pri: float
    s_dual: float
    eps_pri: float
    eps_dual: float
    rho: float


@dataclass
class AdmmState:
    iteration: int
    rho: float
    duals: dict
    originals: dict
    copies: dict
    prev_copies: dict
    history: list = field(default_factory=list)


def _flat(values: dict, agent) -> np.ndarray:
    return np.concatenate([np.ravel(values[agent][s]) for s in sorted(values[agent])])


def _flat_all(values: dict) -> np.ndarray:
    return np.concatenate([_flat(values, a) for a in sorted(values)])


def compute_residuals(originals: dict, copies: dict, prev_copies: dict, rho: float = 1.0,
                      scaled: bool = False) -> tuple:
    """Sum over agents of the consensus gap norm and of the copy-change norm."""
    s_pri = 0.0
    s_dual = 0.0
    for a in sorted(originals):
        s_pri += float(np.linalg.norm(_flat(originals, a) - _flat(copies, a)))
        s_dual += float(np.linalg.norm(_flat(copies, a) - _flat(prev_copies, a)))
    if scaled:
        s_dual *= rho
    return s_pri, s_dual


def tolerances(originals: dict, copies: dict, duals: dict, rho: float, eps_abs: float, eps_rel: float) -> tuple:
    o, c, u = _flat_all(originals), _flat_all(copies), _flat_all(duals)
    root = math.sqrt(o.size)
    eps_pri = root * eps_abs + eps_rel * max(float(np.linalg.norm(o)), float(np.linalg.norm(c)))
    eps_dual = root * eps_abs + eps_rel * rho * float(np.linalg.norm(u))
    return eps_pri, eps_dual


def check_convergence(state: AdmmState, config: AdmmConfig) -> bool:
    r = state.history[-1]
    return r.s_pri <= r.eps_pri and r.s_dual <= r.eps_dual


def update_duals(duals: dict, originals: dict, copies: dict) -> dict:
    return {a: {s: duals[a][s] + (originals[a][s] - copies[a][s]) for s in duals[a]} for a in duals}


def rescale_duals(duals: dict, rho_old: float, rho_new: float) -> dict:
    f = rho_old / rho_new
    return {a: {s: v * f for s, v in d.items()} for a, d in duals.items()}


def next_rho(rho: float, s_pri: float, s_dual: float, mu: float, tau_inc: float, tau_dec: float) -> float:
    if s_pri > mu * s_dual:
        return rho * tau_inc
    if s_dual > mu * s_pri:
        return rho / tau_dec
    return rho


def adapt_rho(state: AdmmState, mu: float = 10.0, tau_inc: float = 2.0, tau_dec: float = 2.0) -> float:
    """Residual-balancing update of rho; the scaled duals follow."""
    r = state.history[-1]
    new = next_rho(state.rho, r.s_pri, r.s_dual, mu, tau_inc, tau_dec)
    if new != state.rho:
        state.duals = rescale_duals(state.duals, state.rho, new)
        state.rho = new
    return new


# --- run -------------------------------------------------------------------------------

@dataclass
class AdmmResult:
    plan: DispatchPlan
    state: AdmmState
    trace: list  # JSON lines
    converged: bool
    objective: float
    agents: dict
    aggregator: Aggregator
    timings: dict

    @property
    def iterations(self) -> int:
        return self.state.iteration

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.trace:
                fh.write(line + "\n")


def _broadcast(state: AdmmState, kind: str) -> AgentMessage:
    agents = {a: {"copy": state.copies[a], "dual": state.duals[a]} for a in sorted(state.copies)}
    return AgentMessage(AGGREGATOR, state.iteration, kind, {"rho": state.rho, "agents": agents})


def _record(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True)


def make_agents(system: SystemData, config: AdmmConfig) -> dict:
    agents = {}
    for lv in system.lvs:
        a = LvAgent(system, lv.name, config.nu, config.qp)
        agents[a.sender] = a
    for res in system.mvccrs:
        a = MvccrAgent(system, res.name, config.qp)
        agents[a.sender] = a
    return agents


def run_admm(system: SystemData, config: AdmmConfig | None = None, agents: dict | None = None,
             order=None) -> AdmmResult:
    """Run to convergence; raises :class:`MaxIterExceeded` (carrying the last
    iterate as ``result``) when ``max_iter`` is reached first.

    ``order`` optionally permutes the sequence in which agents are solved;
    the iterates do not depend on it.
    """
    config = config or AdmmConfig()
    agents = agents if agents is not None else make_agents(system, config)
    names = list(order) if order is not None else sorted(agents)
    if sorted(names) != sorted(agents):
        raise ValidationError("order must list every agent exactly once")
    aggregator = Aggregator(system, config.nu, config.qp)
    trace = [_record({"record": "config", "config": config.to_dict(), "agents": sorted(agents)})]
    t_start = time.perf_counter()
    timings = {"agents": 0.0, "aggregator": 0.0}

    def gather(msgs) -> dict:
        out = {}
        for m in sorted(msgs, key=lambda m: m.sender):
            line = m.to_json()
            trace.append(line)
            parsed = AgentMessage.from_json(line)
            out[parsed.sender] = {s: parsed.series(s) for s in sorted(parsed.payload)}
        return out

    originals = gather(agents[a].initial(config.zero_start) for a in names)
    copies = {a: {s: v.copy() for s, v in vals.items()} for a, vals in originals.items()}
    duals = {a: {s: np.zeros_like(v) for s, v in vals.items()} for a, vals in originals.items()}
    state = AdmmState(0, float(config.rho0), duals, originals, copies, copies)
    msg = _broadcast(state, COPIES_AND_DUALS)
    line = msg.to_json()
    trace.append(line)
    bus = AgentMessage.from_json(line)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    converged = False
    try:
        while state.iteration < config.max_iter:
            k = state.iteration + 1
            t0 = time.perf_counter()
            if pool is not None:
                replies = list(pool.map(lambda a: agents[a].step(bus), names))
            else:
                replies = [agents[a].step(bus) for a in names]
            timings["agents"] += time.perf_counter() - t0
            state.originals = gather(replies)
            t0 = time.perf_counter()
            new_copies = aggregator.solve(state.originals, state.duals, state.rho, k)
            timings["aggregator"] += time.perf_counter() - t0
            state.prev_copies, state.copies = state.copies, new_copies
            state.duals = update_duals(state.duals, state.originals, state.copies)
            state.iteration = k
            s_pri, s_dual = compute_residuals(state.originals, state.copies, state.prev_copies, state.rho,
                                              config.scaled_dual_residual)
            eps_pri, eps_dual = tolerances(state.originals, state.copies, state.duals, state.rho,
                                           config.eps_abs, config.eps_rel)
            state.history.append(ResidualRecord(k, s_pri, s_dual, eps_pri, eps_dual, state.rho))
            converged = check_convergence(state, config)
            trace.append(_record({"record": "residual", "iteration": k, "s_pri": s_pri, "s_dual": s_dual,
                                  "eps_pri": eps_pri, "eps_dual": eps_dual, "rho": state.rho,
                                  "converged": converged}))
            if not converged and config.adaptive_rho:
                old = state.rho
                if adapt_rho(state, config.mu, config.tau_inc, config.tau_dec) != old:
                    trace.append(_record({"record": "rho", "iteration": k, "old": old, "new": state.rho}))
            line = _broadcast(state, CONVERGED if converged else COPIES_AND_DUALS).to_json()
            trace.append(line)
            bus = AgentMessage.from_json(line)
            if converged:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    timings["total"] = time.perf_counter() - t_start

    mv_p, mv_q = aggregator.plan()
    lv_plans = {a.name: a.plan() for a in agents.values() if isinstance(a, LvAgent)}
    plan = DispatchPlan(mv_p, mv_q, system.mv.model.base_power, dict(sorted(lv_plans.items())), system.mv.name)
    objective = aggregator.local_objective() + sum(agents[a].local_objective() for a in sorted(agents))
    result = AdmmResult(plan, state, trace, converged, objective, agents, aggregator, timings)
    if not converged:
        raise MaxIterExceeded(state.iteration, result)
    return result


# --- trace tools -------------------------------------------------------------------------

def read_trace(path_or_lines) -> list:
    if isinstance(path_or_lines, (list, tuple)):
        lines = path_or_lines
    else:
        with open(path_or_lines) as fh:
            lines = fh.read().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def replay_trace(records: list) -> list:
    """Recompute residuals, tolerances and duals from the messages alone.

    Returns one dict per iteration with the recomputed values next to the
    logged ones and a flag telling whether the broadcast duals match.
    """
    cfg = next(r["config"] for r in records if r["record"] == "config")
    by_iter: dict = {}
    logged = {}
    for r in records:
        if r["record"] == "message":
            m = AgentMessage.from_record(r)
            slot = by_iter.setdefault(m.iteration, {"orig": {}, "bcast": None})
            if m.kind == ORIGINALS:
                slot["orig"][m.sender] = {s: m.series(s) for s in sorted(m.payload)}
            else:
                slot["bcast"] = m
        elif r["record"] == "residual":
            logged[r["iteration"]] = r

    def unpack(m, part):
        return {a: {s: np.asarray(v, float) for s, v in sorted(d[part].items())}
                for a, d in sorted(m.payload["agents"].items())}

    out = []
    prev = by_iter[0]["bcast"]
    for k in sorted(i for i in by_iter if i > 0):
        cur = by_iter[k]
        orig = cur["orig"]
        prev_copies, duals, rho = unpack(prev, "copy"), unpack(prev, "dual"), float(prev.payload["rho"])
        copies = unpack(cur["bcast"], "copy")
        duals = update_duals(duals, orig, copies)
        s_pri, s_dual = compute_residuals(orig, copies, prev_copies, rho, cfg["scaled_dual_residual"])
        eps_pri, eps_dual = tolerances(orig, copies, duals, rho, cfg["eps_abs"], cfg["eps_rel"])
        new_rho = float(cur["bcast"].payload["rho"])
        if new_rho != rho:
            duals = rescale_duals(duals, rho, new_rho)
        sent = unpack(cur["bcast"], "dual")
        duals_ok = all(np.array_equal(duals[a][s], sent[a][s]) for a in sent for s in sent[a])
        out.append({"iteration": k, "s_pri": s_pri, "s_dual": s_dual, "eps_pri": eps_pri,
                    "eps_dual": eps_dual, "rho": rho, "duals_match": duals_ok, "logged": logged.get(k)})
        prev = cur["bcast"]
    return out


# --- privacy audit -------------------------------------------------------------------------

@dataclass
class AuditReport:
    passed: bool
    leaks: list
    messages: int
    iterations: int
    expected_messages: int
    init_messages: int

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (f"{state}: {self.messages} messages over {self.iterations} iterations "
                f"(expected {self.expected_messages}), {len(self.leaks)} leak(s)")


def _check_series(value, shape, where, leaks):
    arr = None
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        pass
    if arr is None or arr.ndim != 2 or (shape is not None and arr.shape != shape):
        leaks.append(f"{where}: not a scenario-by-step series")


def audit_privacy(records: list) -> AuditReport:
    """Check that every message carries boundary series only.

    Originals may hold exactly ``p, q, v`` (LV) or ``p, q`` (MV resource);
    aggregator broadcasts hold ``rho`` and, per agent, the copies and duals
    of those same symbols.
    """
    leaks = []
    msgs = [r for r in records if r.get("record") == "message"]
    allowed = {"lv": set(LV_SYMBOLS), "mvccr": set(MVCCR_SYMBOLS)}
    shape = None
    for r in msgs:
        if r["kind"] == ORIGINALS and isinstance(r["payload"].get("p"), list):
            shape = np.shape(r["payload"]["p"])
            break

    def check_block(block, agent, where):
        kind = agent.split(":", 1)[0]
        syms = allowed.get(kind)
        if syms is None:
            leaks.append(f"{where}: unknown agent {agent!r}")
            return
        if not isinstance(block, dict):
            leaks.append(f"{where}: expected a mapping of boundary series")
            return
        for key, val in block.items():
            if key not in syms:
                leaks.append(f"{where}.{key}: field not allowed for {kind} agents")
            else:
                _check_series(val, shape, f"{where}.{key}", leaks)

    for i, r in enumerate(msgs):
        extra = set(r) - {"record", "sender", "iteration", "kind", "payload"}
        for key in sorted(extra):
            leaks.append(f"message {i} ({r.get('sender')}): field {key!r} not allowed")
        sender, kind, payload = r.get("sender", ""), r.get("kind"), r.get("payload", {})
        where = f"message {i} ({sender}, k={r.get('iteration')}) payload"
        if kind == ORIGINALS:
            check_block(payload, sender, where)
        elif kind in (COPIES_AND_DUALS, CONVERGED):
            if sender != AGGREGATOR:
                leaks.append(f"{where}: broadcast from non-aggregator {sender!r}")
            for key in sorted(set(payload) - {"rho", "agents"}):
                leaks.append(f"{where}.{key}: field not allowed in broadcasts")
            if not isinstance(payload.get("rho"), (int, float)):
                leaks.append(f"{where}.rho: not a scalar")
            for agent, parts in sorted(payload.get("agents", {}).items()):
                if not isinstance(parts, dict):
                    leaks.append(f"{where}.agents.{agent}: expected copy/dual mapping")
                    continue
                for key in sorted(set(parts) - {"copy", "dual"}):
                    leaks.append(f"{where}.agents.{agent}.{key}: field not allowed in broadcasts")
                for part in ("copy", "dual"):
                    check_block(parts.get(part, {}), agent, f"{where}.agents.{agent}.{part}")
        else:
            leaks.append(f"{where}: unknown message kind {kind!r}")

    senders = {r["sender"] for r in msgs if r.get("kind") == ORIGINALS}
    iters = max((r["iteration"] for r in msgs), default=0)
    counted = sum(1 for r in msgs if r["iteration"] >= 1)
    expected = (len(senders) + 1) * iters
    init = len(msgs) - counted
    ok = not leaks and counted == expected and init == len(senders) + 1
    return AuditReport(ok, leaks, counted, iters, expected, init)
