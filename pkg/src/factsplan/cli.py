"""Command-line entry point: ``factsplan {validate,pf,sample,plan}``.

Exit codes
----------
0  success (``plan``: converged)
1  runtime failure, e.g. a diverged power flow
2  unreadable input, syntax error or config schema error
3  case validation error
4  ``plan`` stopped without converging but the result is feasible
5  ``plan`` result is infeasible
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import acpf, grid, initializer, planner, report, scenarios
from .acpf import PowerFlowError, SystemState
from .linearize import PlanConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INPUT = 2
EXIT_INVALID = 3
EXIT_NOT_CONVERGED = 4
EXIT_INFEASIBLE = 5

PLAN_EXIT = {"converged": EXIT_OK, "not_converged": EXIT_NOT_CONVERGED, "infeasible": EXIT_INFEASIBLE}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"factsplan: {msg}", file=sys.stderr)


def _load(path: str) -> grid.Network:
    """Case from a file path, or a bundled case name such as ``case30``."""
    p = Path(path)
    try:
        if not p.exists() and not p.suffix:
            return grid.bundled_case(path)
        net = grid.load_case(p)
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"{path}: no such file or bundled case") from None
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc.strerror or exc}") from None
    except UnicodeDecodeError as exc:
        raise CliError(EXIT_INPUT, f"{path}: not a text file ({exc.reason})") from None
    except grid.CaseSyntaxError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None
    except grid.CaseError as exc:
        raise CliError(EXIT_INVALID, f"{path}: {exc}") from None
    try:
        grid.validate(net)
    except grid.CaseValidationError as exc:
        raise CliError(EXIT_INVALID, f"{path}: {exc}") from None
    return net


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args) -> int:
    net = _load(args.case)
    print(f"{args.case}: ok ({net.n_bus} buses, {net.n_branch} branches, {net.n_gen} generators)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pf


def _violations(vs):
    return [{"kind": v.kind, "element": v.element, "magnitude": v.magnitude} for v in vs]


def cmd_pf(args) -> int:
    net = _load(args.case)
    st = SystemState.from_case(net)
    loads = (net.pd * args.scale, net.qd * args.scale)
    # non-slack dispatch follows the load; the slack takes the losses
    st.p_gen = st.p_gen * args.scale
    res = acpf.solve_pf(net, st, loads, tol=args.tol, max_iter=args.max_iter,
                        enforce_q_limits=not args.no_q_limits, verbose=args.verbose)
    if not res.converged:
        _err(f"power flow diverged after {res.iterations} iterations "
             f"(max mismatch {res.max_mismatch:.3e} pu)")
        for h in res.history:
            print(json.dumps(h), file=sys.stderr)
        return EXIT_RUNTIME
    flows = acpf.branch_flows(net, res.state)
    out = {
        "case": net.name,
        "scale": args.scale,
        "converged": True,
        "iterations": res.iterations,
        "max_mismatch": res.max_mismatch,
        "switched_pv_to_pq": [list(s) for s in res.switched],
        "state": res.state.to_dict(),
        "bus_ids": net.bus_ids.tolist(),
        "branch_flows": [
            {"branch": net.branch_label(k), "s_from_mva": [float(flows.s_from[k].real * net.base_mva),
                                                          float(flows.s_from[k].imag * net.base_mva)],
             "s_to_mva": [float(flows.s_to[k].real * net.base_mva), float(flows.s_to[k].imag * net.base_mva)],
             "rate_mva": float(net.rate[k] * net.base_mva)}
            for k in range(net.n_branch)
        ],
        "cost_per_hour": net.total_cost(res.state.p_gen),
        "violations": _violations(planner.check_feasibility(net, res.state, args.tol_feas)),
    }
    _dump(out, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def _sample(net, args, cfg: PlanConfig | None = None) -> scenarios.ScenarioSet:
    oracle = initializer.congestion_oracle(cfg) if args.filter_congestion else None
    return scenarios.generate(net, years=args.years, per_year=args.per_year, growth=args.beta, seed=args.seed,
                              pf_oracle=oracle, sigma_scale=args.sigma_scale)


def cmd_sample(args) -> int:
    net = _load(args.case)
    ss = _sample(net, args)
    if args.out:
        ss.dump(args.out)
    else:
        for s in ss:
            print(s.to_json())
    print(f"{len(ss)} scenarios over {args.years} year(s)", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plan


def _config(args) -> PlanConfig:
    values: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"{args.config}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_INPUT, f"{args.config}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise CliError(EXIT_INPUT, f"{args.config}: expected a flat JSON object")
        values.update(doc)
    overrides = {
        "n_years": args.n_years,
        "c_svc": args.c_svc,
        "c_sc": args.c_sc,
        "max_outer_iter": args.max_outer_iter,
        "threads": args.threads,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.freeze_dispatch:
        values["freeze_dispatch"] = True
    if args.no_line_limits:
        values["include_line_limits"] = False
    values.setdefault("threads", os.cpu_count() or 1)
    try:
        return PlanConfig.from_mapping(values)
    except KeyError as exc:
        raise CliError(EXIT_INPUT, f"config schema error: {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"config schema error: {exc}") from None


def _scenario_set(net, args, cfg) -> scenarios.ScenarioSet:
    if args.scenarios:
        try:
            return scenarios.ScenarioSet.load(args.scenarios)
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"{args.scenarios}: {exc.strerror or exc}") from None
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CliError(EXIT_INPUT, f"{args.scenarios}: malformed scenario file ({exc})") from None
    if args.years:
        return _sample(net, args, cfg)
    return planner.single_scenario(net, args.scale)


def cmd_plan(args) -> int:
    net = _load(args.case)
    cfg = _config(args)
    ss = _scenario_set(net, args, cfg)
    for s in ss:
        if s.p_load.size != net.n_bus:
            raise CliError(EXIT_INPUT, f"scenario has {s.p_load.size} loads, case has {net.n_bus} buses")
    try:
        pl, trace = planner.plan(net, ss, cfg, init=args.init)
    except initializer.InitializationError as exc:
        _err(f"initialization failed: {exc}")
        return EXIT_INFEASIBLE
    except PowerFlowError as exc:
        _err(f"power flow failed: {exc}")
        return EXIT_RUNTIME
    doc = report.plan_report(net, pl, trace, ss, cfg)
    _dump(doc, args.out)
    if args.dot:
        Path(args.dot).write_text(report.to_dot(net, pl, report.overloaded_lines(pl)))
    svc = ", ".join(f"bus {b}: {q:.3f} MVAr" for b, q in pl.svc_devices(net).items()) or "none"
    sc = ", ".join(f"{lab}: {100 * f:.2f}% of x" for lab, f in pl.sc_devices(net).items()) or "none"
    print(f"status {pl.status}; SVC {svc}; SC {sc}; investment {pl.investment_cost:.2f} $; "
          f"operation {pl.expected_operational_cost:.2f} $/h", file=sys.stderr)
    return PLAN_EXIT.get(pl.status, EXIT_RUNTIME)


# ---------------------------------------------------------------------------
# argument parsing


def _positive(value: str) -> float:
    x = float(value)
    if not x > 0 or not np.isfinite(x):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return x


def _sampling_flags(p, *, years_default):
    p.add_argument("--years", type=int, default=years_default, help="number of yearly load-duration curves")
    p.add_argument("--per-year", type=int, default=16, help="scenarios per yearly curve")
    p.add_argument("--beta", type=float, default=0.015, help="annual load growth (0.015 = 1.5%%)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-scale", type=float, default=1.0, help="multiplier on every segment's noise level")
    p.add_argument("--filter-congestion", action="store_true",
                   help="collapse segments whose samples are all uncongested")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="factsplan", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and check a case file")
    p.add_argument("case")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pf", help="AC power flow at the case dispatch")
    p.add_argument("case")
    p.add_argument("--scale", type=_positive, default=1.0, help="uniform load (and dispatch) multiplier")
    p.add_argument("--max-iter", type=int, default=30)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--tol-feas", type=float, default=1e-4, help="violation reporting threshold, pu")
    p.add_argument("--no-q-limits", action="store_true", help="do not switch PV buses at Q limits")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("sample", help="write a JSON-lines scenario set")
    p.add_argument("case")
    _sampling_flags(p, years_default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("plan", help="run the investment planner")
    p.add_argument("case")
    p.add_argument("--config", help="flat JSON object of planner settings")
    p.add_argument("--scenarios", help="JSON-lines scenario file (see 'sample')")
    _sampling_flags(p, years_default=0)
    p.add_argument("--scale", type=_positive, default=1.0, help="load multiplier of the single-scenario run")
    p.add_argument("--init", choices=initializer.INITIALIZERS, default="opf")
    p.add_argument("--n-years", type=float)
    p.add_argument("--c-svc", type=float, help="$/MVAr")
    p.add_argument("--c-sc", type=float, help="$/Ohm")
    p.add_argument("--max-outer-iter", type=int)
    p.add_argument("--freeze-dispatch", action="store_true")
    p.add_argument("--no-line-limits", action="store_true")
    p.add_argument("--threads", type=int, help="scenario worker threads (default: available cores)")
    p.add_argument("--out", help="JSON report path (default: stdout)")
    p.add_argument("--dot", help="write a Graphviz rendering of the plan")
    p.set_defaults(func=cmd_plan)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
