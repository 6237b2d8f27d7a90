"""Starting dispatch and AC state for each scenario.

Two procedures are provided.  ``init_opf_no_thermal`` runs the sequential QP
loop as a plain economic dispatch (no investment, no line limits).
``init_proportional`` searches for the largest load level at which a full OPF
is feasible, solves it, and scales the resulting dispatch back up to the
scenario's load.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import acpf, sqp
from .acpf import PowerFlowError, SystemState
from .grid import Network
from .linearize import PlanConfig
from .scenarios import HOURS_PER_YEAR, Congestion, Scenario

log = logging.getLogger(__name__)

ALPHA_MIN = 0.1
ALPHA_TOL = 1e-3
BISECTION_ITERS = 20


class InitializationError(RuntimeError):
    pass


@dataclass
class ProportionalResult:
    state: SystemState
    alpha: float
    opf_state: SystemState  # step (b), at the reduced load


def _as_scenario(net: Network, scenario) -> Scenario:
    if scenario is None:
        return Scenario.base(net)
    if isinstance(scenario, Scenario):
        return scenario
    p, q = scenario
    return Scenario(np.asarray(p, float), np.asarray(q, float))


def _check_capacity(net: Network, sc: Scenario) -> None:
    online = float(net.pmax.sum())
    need = float(sc.p_load.sum())
    if online < need:
        raise InitializationError(f"insufficient generation capacity: {online:.4g} pu for {need:.4g} pu of load")


def scale_dispatch(state: SystemState, factor: float) -> SystemState:
    """Multiply every generator's active and reactive output by ``factor``."""
    return replace(state, p_gen=state.p_gen * factor, q_gen=state.q_gen * factor)


def proportional_start(net: Network, sc: Scenario, cfg: PlanConfig | None = None) -> SystemState:
    """Case dispatch rescaled to the scenario's total load, then AC-solved."""
    cfg = cfg or PlanConfig()
    st = SystemState.from_case(net)
    total0 = float(st.p_gen.sum())
    if total0 > 0:
        st.p_gen = np.clip(st.p_gen * float(sc.p_load.sum()) / total0, net.pmin, net.pmax)
    res = acpf.solve_pf(net, st, sc.loads, tol=cfg.tol_pf, max_iter=cfg.max_iter_pf,
                        enforce_q_limits=cfg.enforce_q_limits_pf)
    return res.state


def _opf(net, sc, start, cfg, *, lines, stop_when_feasible=False):
    ocfg = replace(cfg, fix_investment=True, include_line_limits=lines, n_years=1.0, freeze_dispatch=False)
    single = replace(sc, hours_per_year=HOURS_PER_YEAR)
    return sqp.run(net, [single], [start], ocfg, weights=[HOURS_PER_YEAR], stop_when_feasible=stop_when_feasible)


def init_opf_no_thermal(net: Network, scenario=None, cfg: PlanConfig | None = None) -> SystemState:
    """Economic dispatch with voltage and generator limits but no line limits."""
    cfg = cfg or PlanConfig()
    sc = _as_scenario(net, scenario)
    _check_capacity(net, sc)
    start = proportional_start(net, sc, cfg)
    res = _opf(net, sc, start, cfg, lines=False)
    if res.status != "converged":
        raise InitializationError(f"dispatch did not converge ({res.status}, max violation {res.max_violation:.3g})")
    return res.states[0]


def opf_feasible(net: Network, sc: Scenario, cfg: PlanConfig, start=None):
    """OPF run that stops at the first feasible iterate: returns (feasible, state)."""
    try:
        start = start if start is not None else proportional_start(net, sc, cfg)
        res = _opf(net, sc, start, cfg, lines=cfg.include_line_limits, stop_when_feasible=True)
    except PowerFlowError:
        return False, None
    return res.max_violation < cfg.tol_feas, res.states[0]


def init_proportional(net: Network, scenario=None, cfg: PlanConfig | None = None) -> ProportionalResult:
    """Down-scale the load until OPF is feasible, solve it, scale the dispatch back up.

    ``alpha`` is the feasibility-restoring load factor (1 when the scenario is
    already feasible); the dispatch is multiplied by ``1/alpha`` and the final
    power flow keeps the OPF's generator voltages.
    """
    cfg = cfg or PlanConfig()
    sc = _as_scenario(net, scenario)
    _check_capacity(net, sc)

    def at(alpha):
        return replace(sc, p_load=sc.p_load * alpha, q_load=sc.q_load * alpha)

    ok, st = opf_feasible(net, sc, cfg)
    if ok:
        alpha, feas_state = 1.0, st
    else:
        ok, st = opf_feasible(net, at(ALPHA_MIN), cfg)
        if not ok:
            raise InitializationError(f"OPF infeasible even at load factor {ALPHA_MIN}")
        lo, hi, feas_state = ALPHA_MIN, 1.0, st
        for _ in range(BISECTION_ITERS):
            if hi - lo <= ALPHA_TOL:
                break
            mid = 0.5 * (lo + hi)
            ok, st = opf_feasible(net, at(mid), cfg)
            log.info("alpha %.4f feasible=%s", mid, ok)
            if ok:
                lo, feas_state = mid, st
            else:
                hi = mid
        alpha = lo

    # (b) OPF at the reduced load, starting from the feasibility point
    res = _opf(net, at(alpha), feas_state, cfg, lines=cfg.include_line_limits)
    opf_state = res.states[0] if res.status != "infeasible" else feas_state
    # (c) proportional scale-up, (d) power flow with the OPF voltages held
    scaled = scale_dispatch(opf_state, 1.0 / alpha)
    try:
        final = acpf.solve_pf(net, scaled, sc.loads, tol=cfg.tol_pf, max_iter=cfg.max_iter_pf,
                              enforce_q_limits=cfg.enforce_q_limits_pf, flat_start_fallback=False).state
    except PowerFlowError as exc:
        raise InitializationError(f"power flow after scale-up failed: {exc}") from exc
    return ProportionalResult(final, alpha, opf_state)


def congestion_oracle(cfg: PlanConfig | None = None):
    """Classifier for :func:`scenarios.congestion_filter`.

    Solves the power flow at the case dispatch rescaled to the scenario's load.
    A diverged flow is ``infeasible``; any voltage, generator or line limit
    exceeded by more than ``tol_feas`` is ``congested``.
    """
    cfg = cfg or PlanConfig()

    def classify(net: Network, sc: Scenario) -> Congestion:
        st = SystemState.from_case(net)
        total0 = float(st.p_gen.sum())
        if total0 > 0:
            st.p_gen = st.p_gen * float(sc.p_load.sum()) / total0
        res = acpf.solve_pf(net, st, sc.loads, tol=cfg.tol_pf, max_iter=cfg.max_iter_pf,
                            enforce_q_limits=cfg.enforce_q_limits_pf)
        if not res.converged:
            return Congestion.INFEASIBLE
        if sqp.max_violation(net, res.state, cfg.include_line_limits) > cfg.tol_feas:
            return Congestion.CONGESTED
        return Congestion.UNCONGESTED

    return classify


INITIALIZERS = ("opf", "proportional", "case")


def initialize(net: Network, scenarios, cfg: PlanConfig | None = None, method: str = "opf") -> list[SystemState]:
    """One starting state per scenario (``case`` = case dispatch rescaled to the load)."""
    cfg = cfg or PlanConfig()
    if method not in INITIALIZERS:
        raise ValueError(f"unknown initializer {method!r}; expected one of {INITIALIZERS}")

    def one(sc):
        if method == "opf":
            return init_opf_no_thermal(net, sc, cfg)
        if method == "proportional":
            return init_proportional(net, sc, cfg).state
        return proportional_start(net, sc, cfg)

    return sqp._map(one, list(scenarios), cfg.threads)
