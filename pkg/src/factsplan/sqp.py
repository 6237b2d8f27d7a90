"""Sequential linearize / QP / AC power flow loop shared by the planner and the OPF initializer.

Each outer iteration linearizes every scenario around its current AC state,
solves one joint QP, applies the deviations and re-solves the AC power flow.
Steps are accepted on an l1 merit function (objective plus priced
violations) with a simple trust-region ratio test.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import acpf, linearize, qp
from .acpf import PowerFlowError, SystemState
from .grid import Network
from .linearize import PlanConfig

log = logging.getLogger(__name__)

MIN_RADIUS = 1e-3
FEASIBLE_FRACTION = 0.5  # cost-only acceptance needs violations below this share of tol_feas
MAX_PF_RETRIES = 3
STALL_WINDOW = 4  # accepted infeasible iterations without a 1% drop in the largest violation
PENALTY_GROWTH = 10.0
MAX_PENALTY_FACTOR = 1e3  # times the default price


@dataclass
class Capacities:
    """Installed capacities in pu (series reactance per branch, SVC rating per bus)."""

    sc_capacity: np.ndarray
    svc_capacity: np.ndarray

    @classmethod
    def zeros(cls, net: Network) -> "Capacities":
        return cls(np.zeros(net.n_branch), np.zeros(net.n_bus))

    def copy(self) -> "Capacities":
        return Capacities(self.sc_capacity.copy(), self.svc_capacity.copy())


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    merit: float
    max_violation: float
    qp_status: str
    qp_iterations: int
    pf_iterations: int
    step_v: float
    step_theta: float
    step_dx: float
    radius: float
    ratio: float
    accepted: bool
    penalty: float
    note: str = ""


@dataclass
class IterationTrace:
    records: list[IterationRecord] = field(default_factory=list)

    def append(self, rec: IterationRecord) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, k):
        return self.records[k]

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]


@dataclass
class SqpResult:
    states: list[SystemState]
    caps: Capacities
    status: str  # "converged" | "not_converged" | "infeasible"
    objective: float
    max_violation: float
    penalty: float
    trace: IterationTrace


# ---------------------------------------------------------------------------
# evaluation helpers


def operating_cost(net: Network, state: SystemState) -> float:
    """Generation cost in $/h."""
    return net.total_cost(state.p_gen)


def investment_cost(net: Network, caps: Capacities, cfg: PlanConfig) -> float:
    return float(cfg.sc_unit_cost(net) @ caps.sc_capacity + cfg.svc_unit_cost(net) * caps.svc_capacity.sum())


def objective(net, states, caps, cfg, weights) -> float:
    """Investment plus ``n_years`` times the weighted yearly operating cost."""
    op = sum(w * operating_cost(net, st) for w, st in zip(weights, states))
    return investment_cost(net, caps, cfg) + cfg.n_years * op


def max_violation(net: Network, state: SystemState, include_lines: bool = True) -> float:
    """Largest limit violation in pu (apparent-power magnitude for lines)."""
    worst = 0.0
    for val, lo, hi in ((state.v, net.vmin, net.vmax), (state.p_gen, net.pmin, net.pmax),
                        (state.q_gen, net.qmin, net.qmax)):
        if len(val):
            worst = max(worst, float(np.max(np.maximum(lo - val, val - hi), initial=0.0)))
    if include_lines and net.n_branch:
        s = np.sqrt(acpf.apparent_sq(net, state))
        rate = np.concatenate([net.rate, net.rate])
        worst = max(worst, float(np.max(s - rate, initial=0.0)))
    return worst


def _map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))  # map preserves input order
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# the loop


def project(net, scenario, state, delta, cfg) -> tuple[SystemState, int]:
    """Apply one scenario's QP deviations and re-solve the AC power flow.

    ``delta`` maps quantity names to deviation vectors.  dx, dq and the
    non-slack dispatch are held; generator-bus voltages act as setpoints.
    """
    trial = replace(
        state,
        v=state.v + delta["v"],
        theta=state.theta + delta["theta"],
        dx=state.dx + delta["dx"],
        dq=state.dq + delta["dq"],
        p_gen=state.p_gen + delta["p_gen"],
        q_gen=state.q_gen + delta["q_gen"],
    )
    res = acpf.solve_pf(net, trial, scenario.loads, tol=cfg.tol_pf, max_iter=cfg.max_iter_pf,
                        enforce_q_limits=cfg.enforce_q_limits_pf, flat_start_fallback=False)
    return res.state, res.iterations


def _slack_gain(problem, sol_x) -> float:
    """Part of the QP's predicted reduction that comes from shrinking elastic slacks."""
    gain = 0.0
    for (a, name), (sl, _) in problem.var_map.blocks.items():
        if name == "slack":
            gain += float(problem.linear_cost[sl] @ (problem.x_ref[sl] - sol_x[sl]))
    return gain


def _deltas(problem, sol_x, a):
    vm = problem.var_map
    return {q: sol_x[vm.slice(a, q)] for q in ("v", "theta", "dx", "dq", "p_gen", "q_gen")}


def run(
    net: Network,
    scenarios,
    states: list[SystemState],
    cfg: PlanConfig,
    *,
    weights=None,
    caps: Capacities | None = None,
    trace: IterationTrace | None = None,
    stop_when_feasible: bool = False,
) -> SqpResult:
    """Iterate linearize -> joint QP -> AC-PF projection until converged or out of iterations.

    The slack price is raised (up to a cap) only when the iteration is stuck
    while infeasible: the QP sees nothing left to gain or the violations
    stall.  High prices slow the QP down, so they are not the default.
    ``stop_when_feasible`` returns at the first iterate without violations
    (used for feasibility probes).
    """
    scenarios = list(scenarios)
    K = len(scenarios)
    if K == 0:
        raise ValueError("no scenarios")
    weights = linearize.scenario_weights(scenarios) if weights is None else np.asarray(weights, float)
    caps = caps.copy() if caps is not None else Capacities.zeros(net)
    trace = trace if trace is not None else IterationTrace()
    states = [s.copy() for s in states]
    lines = cfg.include_line_limits
    mu = cfg.penalty or linearize.default_penalty(net, cfg, weights)
    mu_max = MAX_PENALTY_FACTOR * mu
    settings = qp.AdmmSettings(scaling_iter=cfg.qp_scaling_iter)

    def merit_of(sts, cp):
        J = objective(net, sts, cp, cfg, weights)
        V = sum(linearize.violation_l1(net, s, lines) for s in sts)
        return J, V

    def worst(sts):
        return max(max_violation(net, s, lines) for s in sts)

    J, V = merit_of(states, caps)
    viol = worst(states)
    best = (J, [s.copy() for s in states], caps.copy()) if viol < cfg.tol_feas else None
    radius = 1.0
    pf_failures = 0
    status = "not_converged"
    v_hist = [viol]
    if stop_when_feasible and best is not None:
        return SqpResult(states, caps, "converged", J, viol, mu, trace)

    for it in range(1, cfg.max_outer_iter + 1):
        problem = linearize.assemble_qp(net, scenarios, states, caps, cfg, weights=weights, radius=radius,
                                        penalty=mu)
        sol = qp.solve(problem, tol_primal=cfg.qp_tol, tol_dual=cfg.qp_tol, max_iter=cfg.qp_max_iter,
                       settings=settings, x0=problem.x_ref)
        if sol.status in (qp.QpStatus.PRIMAL_INFEASIBLE, qp.QpStatus.DUAL_INFEASIBLE):
            raise QpFailure(problem, sol)
        m_old = problem.objective(problem.x_ref)
        pred = m_old - problem.objective(sol.x)
        if pred <= 1e-2 * cfg.tol_outer * max(1.0, abs(m_old)):
            # the model sees nothing left to gain at this point
            trace.append(IterationRecord(
                iteration=it, objective=J, merit=J + mu * V, max_violation=viol, qp_status=sol.status.value,
                qp_iterations=sol.iterations, pf_iterations=0, step_v=0.0, step_theta=0.0, step_dx=0.0,
                radius=radius, ratio=np.nan, accepted=False, penalty=mu, note="no predicted progress"))
            if viol < cfg.tol_feas:
                status = "converged"
                break
            if mu >= mu_max:
                break
            mu = min(mu * PENALTY_GROWTH, mu_max)
            log.info("iteration %d: no predicted progress while infeasible, penalty -> %.3g", it, mu)
            continue
        deltas = [_deltas(problem, sol.x, a) for a in range(K)]
        step_v = max(float(np.max(np.abs(d["v"]), initial=0.0)) for d in deltas)
        step_th = max(float(np.max(np.abs(d["theta"]), initial=0.0)) for d in deltas)
        with np.errstate(divide="ignore", invalid="ignore"):
            step_dx = max(float(np.max(np.abs(d["dx"]) / np.abs(net.x0), initial=0.0)) for d in deltas)
        rec = dict(iteration=it, qp_status=sol.status.value, qp_iterations=sol.iterations, step_v=step_v,
                   step_theta=step_th, step_dx=step_dx, radius=radius, penalty=mu)

        try:
            out = _map(lambda a: project(net, scenarios[a], states[a], deltas[a], cfg), list(range(K)), cfg.threads)
        except PowerFlowError as exc:
            pf_failures += 1
            radius *= 0.5
            trace.append(IterationRecord(objective=J, merit=J + mu * V, max_violation=viol, pf_iterations=0,
                                         ratio=np.nan, accepted=False, note=f"pf failed: {exc}", **rec))
            log.info("iteration %d: power flow failed, radius -> %.3g", it, radius)
            if pf_failures > MAX_PF_RETRIES:
                break
            continue
        pf_failures = 0
        new_states = [o[0] for o in out]
        pf_its = int(sum(o[1] for o in out))
        vm = problem.var_map
        new_caps = Capacities(
            np.maximum(sol.x[vm.slice("shared", "sc_capacity")], 0.0),
            np.maximum(sol.x[vm.slice("shared", "svc_capacity")], 0.0),
        )
        # capacity must cover every scenario's setting exactly, not just to QP tolerance
        for s in new_states:
            new_caps.sc_capacity = np.maximum(new_caps.sc_capacity, np.abs(s.dx))
            new_caps.svc_capacity = np.maximum(new_caps.svc_capacity, np.abs(s.dq))
        J_new, V_new = merit_of(new_states, new_caps)
        ared = (J + mu * V) - (J_new + mu * V_new)
        tiny = 1e-12 * max(1.0, abs(J + mu * V))
        if pred > tiny:
            ratio = ared / pred
        else:
            ratio = 1.0 if ared >= -tiny else -1.0
        accepted = ratio >= 0.1
        if not accepted and viol < cfg.tol_feas:
            # between feasible points judge the step on cost alone: sub-tolerance overshoot of a
            # curved limit would otherwise let the penalty veto every step along that limit
            viol_new = worst(new_states)
            pred_cost = pred - _slack_gain(problem, sol.x)
            if viol_new < FEASIBLE_FRACTION * cfg.tol_feas and pred_cost > tiny:
                ratio_cost = (J - J_new) / pred_cost
                if ratio_cost >= 0.1:
                    ratio, accepted = ratio_cost, True
        boundary = step_v >= 0.99 * cfg.trust_v * radius or step_th >= 0.99 * cfg.trust_theta * radius \
            or step_dx >= 0.99 * cfg.trust_dx * radius
        if accepted:
            dJ = J_new - J
            states, caps, J, V = new_states, new_caps, J_new, V_new
            viol = worst(states)
            if ratio > 0.75 and boundary:
                radius = min(1.0, 2.0 * radius)
            elif ratio < 0.25:
                radius *= 0.5
        else:
            dJ = np.inf
            radius *= 0.5
        trace.append(IterationRecord(objective=J, merit=J + mu * V, max_violation=viol, pf_iterations=pf_its,
                                     ratio=float(ratio), accepted=accepted, **rec))
        log.info("iteration %d: J=%.6g viol=%.3g ratio=%.3g radius=%.3g", it, J, viol, ratio, radius)

        feasible = viol < cfg.tol_feas
        if accepted and feasible and (best is None or J <= best[0]):
            best = (J, [s.copy() for s in states], caps.copy())
        if accepted and feasible and (stop_when_feasible or abs(dJ) <= cfg.tol_outer * max(abs(J), 1.0)):
            status = "converged"
            break
        if radius < MIN_RADIUS:
            # steps can no longer change the iterate meaningfully; a feasible point here is a solution
            # to within the trust-region resolution
            if viol < cfg.tol_feas:
                status = "converged"
                if best is None or J <= best[0]:
                    best = (J, [s.copy() for s in states], caps.copy())
            break
        if accepted and not feasible:
            v_hist.append(viol)
            if len(v_hist) > STALL_WINDOW and viol > 0.99 * min(v_hist[:-STALL_WINDOW]):
                if mu >= mu_max:
                    log.info("iteration %d: violations stalled at %.3g", it, viol)
                    break
                mu = min(mu * PENALTY_GROWTH, mu_max)
                v_hist = [viol]

    if status != "converged":
        if best is not None:
            J, states, caps = best[0], best[1], best[2]
            viol = worst(states)
        else:
            status = "infeasible"
    return SqpResult(states, caps, status, J, viol, mu, trace)


class QpFailure(RuntimeError):
    """The joint QP was reported infeasible or unbounded (should not happen with elastic rows)."""

    def __init__(self, problem, solution):
        self.problem = problem
        self.solution = solution
        cert = solution.certificate
        detail = ""
        if cert is not None and solution.status == qp.QpStatus.PRIMAL_INFEASIBLE:
            n_eq = problem.eq_matrix.shape[0]
            n_in = problem.ineq_matrix.shape[0]
            k = int(np.argmax(np.abs(cert)))
            if k < n_eq:
                detail = f"; largest certificate entry on balance row {k}"
            elif k < n_eq + n_in:
                detail = f"; largest certificate entry on {problem.row_info[k - n_eq]}"
            else:
                detail = f"; largest certificate entry on bound of {problem.var_map.describe(k - n_eq - n_in)}"
        super().__init__(f"QP {solution.status.value}{detail}")
