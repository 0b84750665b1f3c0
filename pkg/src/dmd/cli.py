"""Command-line front end.

    dmd solve     --instance FILE            central optimum + KKT certificate
    dmd ne        --instance FILE --scale K  construct, verify and audit an equilibrium
    dmd dynamics  --instance FILE --init ... best-response sweeps, CSV trace
    dmd dims      --instance FILE            message dimension per agent
    dmd validate  --instance FILE            admissibility and tree checks only

Exit codes: 0 ok, 2 unreadable or malformed instance, 3 violated
admissibility or tree assumption, 4 solver failure, 5 equilibrium
certificate failure, 6 best-response dynamics aborted.

Reports are JSON with sorted keys; everything except the ``timing`` block
is a deterministic function of the inputs and ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .equilibrium import (
    DynamicsError,
    audit_ne_properties,
    construct_ne,
    deviation_fuzz,
    random_profile,
    run_dynamics,
    verify_ne,
)
from .generators import dimension_family
from .graph import assign_group_leaders, check_link_connectivity
from .instance import MMTP, UTP, derive_index_sets, validate_instance
from .io import InstanceFileError, load_instance
from .mechanism import ConfigurationError
from .mmtp import MmtpMechanism
from .oracle import SolverError, solve_mmtp, solve_utp
from .utp import UtpMechanism

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_ASSUMPTION = 3
EXIT_SOLVER = 4
EXIT_CERTIFICATE = 5
EXIT_DYNAMICS = 6

FAMILY_SIZES = (10, 20, 40, 80)

log = logging.getLogger("dmd")


class CliExit(Exception):
    def __init__(self, code: int, message: str, report: dict | None = None):
        super().__init__(message)
        self.code = code
        self.report = report


def _configure_logging():
    level = os.environ.get("DMD_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _load(args):
    if not args.instance:
        raise CliExit(EXIT_PARSE, f"{args.command}: --instance is required")
    try:
        loaded = load_instance(args.instance, args.protocol)
    except FileNotFoundError as exc:
        raise CliExit(EXIT_PARSE, f"cannot read instance: {exc}") from exc
    except InstanceFileError as exc:
        raise CliExit(EXIT_PARSE, str(exc)) from exc
    log.info("loaded %s (%s, digest %s)", args.instance, loaded.instance.protocol, loaded.digest[:12])
    return loaded


def _assumption_report(loaded, extended: bool) -> dict:
    inst, tree = loaded.instance, loaded.tree
    sets = derive_index_sets(inst)
    report = {
        "admissibility": [asdict(v) for v in validate_instance(inst).violations],
        "disconnected_links": sorted(l for l, ok in check_link_connectivity(tree, sets).items() if not ok),
    }
    if inst.protocol == MMTP:
        report["leaderless_pairs"] = [list(p) for p in assign_group_leaders(tree, sets).violations]
    problems = []
    if report["admissibility"]:
        problems.append("; ".join(v["message"] for v in report["admissibility"]))
    if report["disconnected_links"] and not extended:
        problems.append(
            f"users of link(s) {report['disconnected_links']} are not connected in the message tree; "
            "rerun with --extended to add relay agents"
        )
    if report.get("leaderless_pairs"):
        problems.append(f"no member adjacent to all others for (group, link) {report['leaderless_pairs']}")
    report["ok"] = not problems
    report["problems"] = problems
    return report


def _check_assumptions(loaded, extended, report):
    rep = _assumption_report(loaded, extended)
    report["assumptions"] = rep
    if not rep["ok"]:
        raise CliExit(EXIT_ASSUMPTION, " | ".join(rep["problems"]), report)


def _solve(loaded, tol=None):
    solver = solve_utp if loaded.instance.protocol == UTP else solve_mmtp
    try:
        return solver(loaded.instance, **({"tol": tol} if tol is not None else {}))
    except SolverError as exc:
        raise CliExit(EXIT_SOLVER, f"solver failed: {exc}") from exc


def _mechanism(loaded, extended):
    cls = UtpMechanism if loaded.instance.protocol == UTP else MmtpMechanism
    try:
        return cls(loaded.instance, loaded.tree, loaded.phi or None, extended=extended)
    except ConfigurationError as exc:
        raise CliExit(EXIT_ASSUMPTION, str(exc)) from exc


def _base_report(args, loaded) -> dict:
    return {
        "command": args.command,
        "instance": {"path": str(args.instance), "digest": loaded.digest, "name": loaded.name,
                     "protocol": loaded.instance.protocol},
        "seed": args.seed,
        "version": __version__,
    }


def _solution_summary(sol) -> dict:
    d = sol.to_dict()
    d["kkt_max"] = sol.kkt.max
    return d


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> dict:
    loaded = _load(args)
    report = _base_report(args, loaded)
    rep = _assumption_report(loaded, args.extended)
    report["assumptions"] = rep
    if not rep["ok"]:
        raise CliExit(EXIT_ASSUMPTION, " | ".join(rep["problems"]), report)
    return report


def cmd_solve(args) -> dict:
    loaded = _load(args)
    report = _base_report(args, loaded)
    _check_assumptions(loaded, args.extended, report)
    try:
        sol = _solve(loaded, args.tol)
    except CliExit as exc:
        raise CliExit(exc.code, str(exc), report) from exc
    report["solution"] = _solution_summary(sol)
    return report


def cmd_ne(args) -> dict:
    loaded = _load(args)
    report = _base_report(args, loaded)
    _check_assumptions(loaded, args.extended, report)
    sol = _solve(loaded)
    mech = _mechanism(loaded, args.extended)
    profile = construct_ne(mech, sol, args.scale)
    tol = args.tol if args.tol is not None else 1e-6
    cert = verify_ne(mech, profile, tol).merge(audit_ne_properties(mech, profile, sol, tol))
    out = mech.outcome(profile)
    report.update(
        scale=args.scale,
        extended=args.extended,
        solution=_solution_summary(sol),
        outcome=out.to_dict(),
        certificate=cert.to_dict(),
        profile=profile.to_dict(),
    )
    ok = cert.passed
    if args.fuzz:
        fz = deviation_fuzz(mech, profile, trials=args.fuzz, seed=args.seed)
        report["fuzz"] = fz.to_dict()
        ok = ok and fz.ok
    if args.out:
        stem = Path(args.out)
        Path(f"{stem.with_suffix('')}.profile.json").write_text(dumps(profile.to_dict()))
        Path(f"{stem.with_suffix('')}.certificate.json").write_text(dumps(cert.to_dict()))
    if not ok:
        failing = cert.failures() + ([] if report.get("fuzz", {}).get("ok", True) else ["deviation_fuzz"])
        raise CliExit(EXIT_CERTIFICATE, f"equilibrium certificate failed: {', '.join(failing)}", report)
    return report


def cmd_dynamics(args) -> dict:
    loaded = _load(args)
    report = _base_report(args, loaded)
    _check_assumptions(loaded, args.extended, report)
    sol = _solve(loaded)
    mech = _mechanism(loaded, args.extended)
    rng = np.random.default_rng(args.seed)
    if args.init == "ne":
        init = construct_ne(mech, sol, args.scale)
    elif args.init == "zero":
        init = mech.zero_profile()
    else:
        init = random_profile(mech, rng)
    report.update(init=args.init, order=args.order, rounds=args.rounds)
    try:
        trace = run_dynamics(mech, init, rounds=args.rounds, order=args.order, seed=args.seed, solution=sol)
        error = None
    except DynamicsError as exc:
        trace, error = exc.trace, str(exc)
    if args.trace_csv:
        Path(args.trace_csv).write_text(trace.to_csv())
    report["dynamics"] = {
        "rounds_run": trace.rounds_run,
        "converged": trace.converged,
        "min_step_improvement": trace.min_improvement(),
        "final_gap": trace.rounds[-1]["gap"] if trace.rounds else None,
        "error": error,
    }
    if error:
        raise CliExit(EXIT_DYNAMICS, f"dynamics aborted: {error}", report)
    return report


def _linear_fit(ns, totals) -> dict:
    A = np.vstack([np.asarray(ns, float), np.ones(len(ns))]).T
    coef, *_ = np.linalg.lstsq(A, np.asarray(totals, float), rcond=None)
    resid = np.asarray(totals, float) - A @ coef
    return {"slope": float(coef[0]), "intercept": float(coef[1]),
            "relative_residual": float(np.linalg.norm(resid) / np.linalg.norm(totals))}


def cmd_dims(args) -> dict:
    if args.instance:
        loaded = _load(args)
        report = _base_report(args, loaded)
        mech = _mechanism(loaded, args.extended)
        dims = mech.dimension()
        report["dimensions"] = {"per_agent": dims.per_agent, "formula": dims.formula,
                                "total": dims.total, "formula_total": dims.formula_total,
                                "matches": dims.matches}
        if not dims.matches:
            raise CliExit(EXIT_CERTIFICATE, "enumerated dimensions disagree with the closed form", report)
        return report
    # no instance: report the generated bounded-degree family
    protocol = args.protocol or UTP
    totals, matches = [], True
    for n in FAMILY_SIZES:
        inst, tree = dimension_family(n, protocol)
        mech = (UtpMechanism if protocol == UTP else MmtpMechanism)(inst, tree)
        d = mech.dimension()
        totals.append(d.total)
        matches = matches and d.matches
    return {
        "command": "dims",
        "family": {"protocol": protocol, "sizes": list(FAMILY_SIZES), "totals": totals,
                   "matches": matches, "fit": _linear_fit(FAMILY_SIZES, totals)},
        "seed": args.seed,
        "version": __version__,
    }


COMMANDS = {
    "solve": cmd_solve,
    "ne": cmd_ne,
    "dynamics": cmd_dynamics,
    "dims": cmd_dims,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmd", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--instance", type=Path)
    p.add_argument("--protocol", choices=(UTP, MMTP), help="override the protocol stored in the file")
    p.add_argument("--tol", type=float, help="KKT tolerance (solve) or certificate tolerance (ne)")
    p.add_argument("--scale", type=float, default=1.0, help="demand scale of the constructed equilibrium")
    p.add_argument("--extended", action="store_true", help="use relay agents on disconnected links")
    p.add_argument("--fuzz", type=int, default=0, help="random unilateral deviations to try (ne)")
    p.add_argument("--rounds", type=int, default=50)
    p.add_argument("--order", choices=("roundrobin", "random"), default="roundrobin")
    p.add_argument("--init", choices=("ne", "zero", "random"), default="ne")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="write the JSON report here instead of stdout")
    p.add_argument("--trace-csv", type=Path)
    return p


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    code, report, message = EXIT_OK, None, None
    try:
        report = COMMANDS[args.command](args)
    except CliExit as exc:
        code, report, message = exc.code, exc.report, str(exc)
        if report is None:
            report = {"command": args.command, "seed": args.seed, "version": __version__}
    if report is not None:
        report["exit_code"] = code
        if message:
            report["error"] = message
        report["timing"] = {"seconds": time.perf_counter() - t0}
        text = dumps(report)
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    if message:
        print(f"dmd {args.command}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
