"""JSON plan report and a DOT rendering of the network with installed devices."""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .grid import Network
from .linearize import PlanConfig
from .planner import InvestmentPlan, Violation
from .sqp import IterationTrace

SCHEMA_VERSION = 1


def _violations(vs: list[Violation]) -> list[dict]:
    return [{"kind": v.kind, "element": v.element, "magnitude": v.magnitude} for v in vs]


def _finite(x):
    """Plain JSON types; NaN/inf become None."""
    if isinstance(x, np.ndarray):
        x = x.tolist()
    elif isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, tuple):
        x = list(x)
    if isinstance(x, float) and not np.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_finite(v) for v in x]
    return x


def plan_report(net: Network, plan: InvestmentPlan, trace: IterationTrace, scenarios, cfg: PlanConfig) -> dict:
    scenarios = list(scenarios)
    per_scenario = []
    for a, sc in enumerate(scenarios):
        per_scenario.append({
            "index": a,
            "year": getattr(sc, "year", 0),
            "segment": getattr(sc, "segment", 0),
            "probability": getattr(sc, "probability", 1.0),
            "hours": getattr(sc, "hours_per_year", None),
            "violations_before": _violations(plan.initial_violations[a]) if plan.initial_violations else [],
            "violations_after": _violations(plan.final_violations[a]) if plan.final_violations else [],
            "generation_mw": (plan.states[a].p_gen * net.base_mva).tolist() if plan.states else [],
        })
    return _finite({
        "schema": SCHEMA_VERSION,
        "case": net.name,
        "status": plan.status,
        "plan": {
            "svc_mvar": {str(k): v for k, v in plan.svc_devices(net).items()},
            "sc_fraction_of_x": plan.sc_devices(net),
            "sc_ohm": {net.branch_label(k): float(plan.sc_capacity[k] * net.z_base[k])
                       for k in np.flatnonzero(plan.sc_capacity > 0)},
            "n_svc": plan.n_svc,
            "n_sc": plan.n_sc,
            "pruned": [list(p) for p in plan.pruned],
        },
        "costs": {
            "investment": plan.investment_cost,
            "operational_per_hour": plan.expected_operational_cost,
            "total": plan.total_cost,
            "n_years": cfg.n_years,
        },
        "scenarios": per_scenario,
        "trace": trace.to_list(),
        "config": asdict(cfg),
    })


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)


def to_dot(net: Network, plan: InvestmentPlan | None = None, overloaded=()) -> str:
    """Graphviz text; SVC buses carry ``svc_mvar``, compensated branches ``sc_pct``.

    ``overloaded`` holds branch labels ("from-to") drawn as overloaded, e.g.
    the lines violated at initialization.
    """
    overloaded = set(overloaded)
    svc = plan.svc_devices(net) if plan is not None else {}
    sc = plan.sc_devices(net) if plan is not None else {}
    lines = [f'graph "{net.name or "network"}" {{', "  node [shape=circle];"]
    gen_buses = {int(net.bus_ids[i]) for i in net.gen_bus}
    for bus in net.bus_ids:
        bus = int(bus)
        attrs = [f'label="{bus}"']
        if bus in gen_buses:
            attrs.append("shape=doublecircle")
        if bus in svc:
            attrs += [f"svc_mvar={svc[bus]:.4f}", "style=filled", "fillcolor=lightblue"]
        lines.append(f"  {bus} [{', '.join(attrs)}];")
    for k in range(net.n_branch):
        f, t = int(net.bus_ids[net.f[k]]), int(net.bus_ids[net.t[k]])
        label = net.branch_label(k)
        attrs = []
        if label in sc:
            attrs += [f"sc_pct={100 * sc[label]:.3f}", "penwidth=3"]
        if label in overloaded:
            attrs += ["overloaded=true", "color=red"]
        suffix = f" [{', '.join(attrs)}]" if attrs else ""
        lines.append(f"  {f} -- {t}{suffix};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def overloaded_lines(plan: InvestmentPlan) -> set[str]:
    """Branch labels with a line violation in any scenario before planning."""
    return {v.element for vs in plan.initial_violations for v in vs if v.kind.startswith("line")}
