"""``dispatch`` command line.

    dispatch run --mode admm --mv mv.json --lv lv1.json lv2.json --synth synth.json --seed 7 --out out/
    dispatch fixture cigre --out fixtures/

Exit codes: 0 success, 2 invalid input, 3 solver or convergence failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .admm import AdmmConfig
from .errors import DispatchError, MaxIterExceeded, SolverError, ValidationError
from .fixtures import write_fixture
from .network import load_grid
from .problems import DEFAULT_NU, linearize_system
from .report import MODES, run_mode, write_artifacts
from .scenarios import load_scenarios, synth_spec_from_dict, synthesize_scenarios

log = logging.getLogger("mgdispatch")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dispatch", description="Day-ahead dispatch of MV/LV distribution grids.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="compute dispatch plans")
    run.add_argument("--mode", required=True, choices=MODES)
    run.add_argument("--mv", required=True, type=Path, help="MV grid file")
    run.add_argument("--lv", nargs="*", default=[], type=Path, help="LV grid files")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenarios", type=Path, help="scenario file")
    src.add_argument("--synth", type=Path, help="synthetic scenario spec")
    run.add_argument("--seed", type=int, default=0, help="seed for --synth")
    run.add_argument("--out", required=True, type=Path)
    d = AdmmConfig()
    run.add_argument("--rho0", type=float, default=d.rho0)
    run.add_argument("--eps-abs", type=float, default=d.eps_abs)
    run.add_argument("--eps-rel", type=float, default=d.eps_rel)
    run.add_argument("--max-iter", type=int, default=d.max_iter)
    run.add_argument("--nu", type=float, default=DEFAULT_NU)
    run.add_argument("--cos-theta-min", type=float, default=None,
                     help="override the power-factor limit of every grid")
    run.add_argument("-v", "--verbose", action="store_true")

    fx = sub.add_parser("fixture", help="write a shipped test system to disk")
    fx.add_argument("kind", choices=("toy", "cigre"))
    fx.add_argument("--out", required=True, type=Path)
    return ap


def _load(args):
    grids = []
    for path in [args.mv] + list(args.lv):
        try:
            grids.append(load_grid(path))
        except OSError as exc:
            raise ValidationError(f"{path}: {exc.strerror}") from None
        except ValidationError as exc:
            raise type(exc)(f"{path}: {exc}") from None
    if args.cos_theta_min is not None:
        grids = [dataclasses.replace(g, cos_theta_min=args.cos_theta_min) for g in grids]
    mv, lvs = grids[0], grids[1:]
    if args.scenarios is not None:
        try:
            scen = load_scenarios(args.scenarios, grids)
        except OSError as exc:
            raise ValidationError(f"{args.scenarios}: {exc.strerror}") from None
    else:
        try:
            doc = json.loads(args.synth.read_text())
        except OSError as exc:
            raise ValidationError(f"{args.synth}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.synth}: invalid JSON ({exc})") from None
        scen = synthesize_scenarios(synth_spec_from_dict(doc), args.seed)
    return mv, lvs, scen


def _run(args) -> int:
    mv, lvs, scen = _load(args)
    system = linearize_system(mv, lvs, scen)
    cfg = AdmmConfig(rho0=args.rho0, eps_abs=args.eps_abs, eps_rel=args.eps_rel, max_iter=args.max_iter,
                     nu=args.nu)
    code = EXIT_OK
    try:
        outcome = run_mode(args.mode, system, nu=args.nu, admm_config=cfg)
    except MaxIterExceeded as exc:
        outcome = getattr(exc, "outcome", None)
        if outcome is None:
            raise
        log.error("%s; writing the last iterate", exc)
        code = EXIT_SOLVER
    files = write_artifacts(outcome, system, args.out)
    for key, val in files["metrics_dict"].items():
        print(f"{key}: {val}")
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "fixture":
            paths = write_fixture(args.kind, args.out)
            print(json.dumps({k: str(v) if not isinstance(v, list) else [str(p) for p in v]
                              for k, v in paths.items()}, indent=2))
            return EXIT_OK
        return _run(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DispatchError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
