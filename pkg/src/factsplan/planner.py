"""Investment planning driver: initialize, iterate, prune, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import acpf, initializer, linearize, sqp
from .acpf import PowerFlowError, SystemState
from .grid import Network
from .linearize import PlanConfig
from .scenarios import HOURS_PER_YEAR, Scenario, ScenarioSet
from .sqp import Capacities, IterationTrace

log = logging.getLogger(__name__)

NUMERICAL_FLOOR = 1e-9  # pu; capacities below this are solver noise


class Violation(NamedTuple):
    kind: str  # v_min, v_max, p_min, p_max, q_min, q_max, line_from, line_to
    element: object  # bus id, 1-based generator row, or "from-to" branch label
    magnitude: float  # pu (apparent-power magnitude for lines)


@dataclass
class CostBreakdown:
    investment: float  # $
    operational_per_hour: float  # expected $/h
    total: float  # $ over the horizon

    def as_dict(self) -> dict:
        return {"investment": self.investment, "operational_per_hour": self.operational_per_hour,
                "total": self.total}


@dataclass
class InvestmentPlan:
    sc_capacity: np.ndarray  # pu of series reactance per in-service branch
    svc_capacity: np.ndarray  # MVAr per bus
    dx: list[np.ndarray]  # per-scenario reactance settings, pu
    dq: list[np.ndarray]  # per-scenario SVC injections, pu
    base_mva: float = 100.0
    investment_cost: float = 0.0
    expected_operational_cost: float = 0.0
    total_cost: float = 0.0
    status: str = "converged"
    states: list[SystemState] = field(default_factory=list, repr=False)
    initial_violations: list[list[Violation]] = field(default_factory=list, repr=False)
    final_violations: list[list[Violation]] = field(default_factory=list, repr=False)
    pruned: list[tuple[str, int]] = field(default_factory=list)

    @property
    def svc_capacity_pu(self) -> np.ndarray:
        return self.svc_capacity / self.base_mva

    @property
    def n_sc(self) -> int:
        return int(np.count_nonzero(self.sc_capacity > 0))

    @property
    def n_svc(self) -> int:
        return int(np.count_nonzero(self.svc_capacity > 0))

    @property
    def device_count(self) -> int:
        return self.n_sc + self.n_svc

    @property
    def capacities(self) -> Capacities:
        return Capacities(np.asarray(self.sc_capacity, float), self.svc_capacity_pu)

    def svc_devices(self, net: Network) -> dict[int, float]:
        """External bus id -> installed MVAr."""
        return {int(net.bus_ids[i]): float(self.svc_capacity[i]) for i in np.flatnonzero(self.svc_capacity > 0)}

    def sc_devices(self, net: Network) -> dict[str, float]:
        """Branch label -> installed capacity as a fraction of the branch reactance."""
        return {net.branch_label(k): float(self.sc_capacity[k] / abs(net.x0[k]))
                for k in np.flatnonzero(self.sc_capacity > 0)}

    @classmethod
    def zero(cls, net: Network, n_scenarios: int) -> "InvestmentPlan":
        return cls(np.zeros(net.n_branch), np.zeros(net.n_bus), [np.zeros(net.n_branch)] * n_scenarios,
                   [np.zeros(net.n_bus)] * n_scenarios, net.base_mva)


# ---------------------------------------------------------------------------
# evaluation


def _weights(scenarios) -> np.ndarray:
    if isinstance(scenarios, ScenarioSet):
        return scenarios.weights()
    return linearize.scenario_weights(scenarios)


def evaluate_objective(net: Network, plan: InvestmentPlan, states, scenarios, cfg: PlanConfig) -> CostBreakdown:
    """Investment $, expected operating $/h (annual average) and the horizon total."""
    inv = sqp.investment_cost(net, plan.capacities, cfg)
    w = _weights(scenarios)
    per_hour = float(sum(wa * net.total_cost(st.p_gen) for wa, st in zip(w, states))) / HOURS_PER_YEAR
    return CostBreakdown(inv, per_hour, inv + cfg.n_years * HOURS_PER_YEAR * per_hour)


def check_feasibility(net: Network, state: SystemState, tol: float = 0.0, include_lines: bool = True) -> list[Violation]:
    """Every generator, voltage and line limit exceeded by more than ``tol``."""
    out: list[Violation] = []
    gen_rows = net.gen_positions + 1
    for kind, val, lo, hi, labels in (
        ("v", state.v, net.vmin, net.vmax, net.bus_ids),
        ("p", state.p_gen, net.pmin, net.pmax, gen_rows),
        ("q", state.q_gen, net.qmin, net.qmax, gen_rows),
    ):
        for i in np.flatnonzero(lo - val > tol):
            out.append(Violation(f"{kind}_min", int(labels[i]), float(lo[i] - val[i])))
        for i in np.flatnonzero(val - hi > tol):
            out.append(Violation(f"{kind}_max", int(labels[i]), float(val[i] - hi[i])))
    if include_lines and net.n_branch:
        s = np.sqrt(acpf.apparent_sq(net, state))
        nl = net.n_branch
        excess = s - np.concatenate([net.rate, net.rate])
        for e in np.flatnonzero(excess > tol):
            kind = "line_from" if e < nl else "line_to"
            out.append(Violation(kind, net.branch_label(e % nl), float(excess[e])))
    return out


# ---------------------------------------------------------------------------
# pruning


def _with_settings(net, scenario, state, dx, dq, cfg) -> SystemState:
    trial = replace(state, dx=dx, dq=dq)
    return acpf.solve_pf(net, trial, scenario.loads, tol=cfg.tol_pf, max_iter=cfg.max_iter_pf,
                         enforce_q_limits=cfg.enforce_q_limits_pf).state


def _apply_prune(net, scenarios, states, caps, devices, cfg):
    caps = caps.copy()
    for kind, i in devices:
        if kind == "svc":
            caps.svc_capacity[i] = 0.0
        else:
            caps.sc_capacity[i] = 0.0
    new_states = []
    for sc, st in zip(scenarios, states):
        dx = np.where(caps.sc_capacity > 0, st.dx, 0.0)
        dq = np.where(caps.svc_capacity > 0, st.dq, 0.0)
        if np.array_equal(dx, st.dx) and np.array_equal(dq, st.dq):
            new_states.append(st)
        else:
            new_states.append(_with_settings(net, sc, st, dx, dq, cfg))
    return new_states, caps


def prune(net: Network, scenarios, states, caps: Capacities, cfg: PlanConfig):
    """Drop devices below the sparsity thresholds unless that breaks feasibility.

    Returns ``(states, caps, pruned)``; ``pruned`` lists ``("svc", bus)`` /
    ``("sc", branch)`` dense indices that were removed.
    """
    # QP round-off is not a device: removed together with the small ones but not reported
    noise = {("svc", int(i)) for i in np.flatnonzero((caps.svc_capacity > 0) & (caps.svc_capacity < NUMERICAL_FLOOR))}
    noise |= {("sc", int(k)) for k in np.flatnonzero((caps.sc_capacity > 0) & (caps.sc_capacity < NUMERICAL_FLOOR))}
    small = [("svc", int(i)) for i in np.flatnonzero(
        (caps.svc_capacity > 0) & (caps.svc_capacity * net.base_mva < cfg.sparsity_threshold_svc))]
    small += [("sc", int(k)) for k in np.flatnonzero(
        (caps.sc_capacity > 0) & (caps.sc_capacity < cfg.sparsity_threshold_sc * np.abs(net.x0)))]
    if not small:
        return states, caps, []
    lines = cfg.include_line_limits
    before = max(sqp.max_violation(net, s, lines) for s in states)
    allowed = max(cfg.tol_feas, before)

    def ok(sts):
        return max(sqp.max_violation(net, s, lines) for s in sts) < allowed

    try:
        trial_states, trial_caps = _apply_prune(net, scenarios, states, caps, small, cfg)
        if ok(trial_states):
            return trial_states, trial_caps, [d for d in small if d not in noise]
    except PowerFlowError:
        pass
    # one device at a time, smallest first; keep every removal that stays feasible
    def size(d):
        return caps.svc_capacity[d[1]] * net.base_mva if d[0] == "svc" else caps.sc_capacity[d[1]] / abs(net.x0[d[1]])

    removed = []
    for dev in sorted(small, key=size):
        try:
            trial_states, trial_caps = _apply_prune(net, scenarios, states, caps, [dev], cfg)
        except PowerFlowError:
            continue
        if ok(trial_states):
            states, caps = trial_states, trial_caps
            if dev not in noise:
                removed.append(dev)
    return states, caps, removed


# ---------------------------------------------------------------------------
# driver


def plan(
    net: Network,
    scenario_set,
    cfg: PlanConfig | None = None,
    *,
    states: list[SystemState] | None = None,
    init: str = "opf",
) -> tuple[InvestmentPlan, IterationTrace]:
    """Run the planning heuristic on every scenario of ``scenario_set``.

    ``states`` (one AC-solved state per scenario) skips initialization;
    otherwise ``init`` selects the initializer ("opf", "proportional", "case").
    """
    cfg = cfg or PlanConfig()
    scenarios = list(scenario_set)
    if not scenarios:
        raise ValueError("empty scenario set")
    weights = _weights(scenario_set)
    if states is None:
        states = initializer.initialize(net, scenarios, cfg, init)
    if len(states) != len(scenarios):
        raise ValueError(f"{len(scenarios)} scenarios but {len(states)} states")
    initial = [check_feasibility(net, s, cfg.tol_feas, cfg.include_line_limits) for s in states]

    res = sqp.run(net, scenarios, states, cfg, weights=weights)
    final_states, caps, removed = prune(net, scenarios, res.states, res.caps, cfg)
    final = [check_feasibility(net, s, cfg.tol_feas, cfg.include_line_limits) for s in final_states]
    status = res.status
    if any(final):
        status = "infeasible" if status != "not_converged" else status
    pl = InvestmentPlan(
        sc_capacity=caps.sc_capacity,
        svc_capacity=caps.svc_capacity * net.base_mva,
        dx=[s.dx.copy() for s in final_states],
        dq=[s.dq.copy() for s in final_states],
        base_mva=net.base_mva,
        status=status,
        states=final_states,
        initial_violations=initial,
        final_violations=final,
        pruned=removed,
    )
    costs = evaluate_objective(net, pl, final_states, scenario_set, cfg)
    pl.investment_cost = costs.investment
    pl.expected_operational_cost = costs.operational_per_hour
    pl.total_cost = costs.total
    log.info("plan %s: %d SVC, %d SC, investment %.6g $", status, pl.n_svc, pl.n_sc, pl.investment_cost)
    return pl, res.trace


def single_scenario(net: Network, load_scale: float = 1.0) -> ScenarioSet:
    """The case's own loads (times ``load_scale``) as a one-scenario, full-year set."""
    return ScenarioSet([Scenario.base(net, load_scale)])
