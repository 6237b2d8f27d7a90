"""Reference experiments on the bundled 30-bus case.

Each function runs one comparison end to end and returns a small result
dataclass; ``scripts/`` wraps them as command-line programs and the
acceptance tests assert on the same numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Network, bundled_case
from .linearize import PlanConfig
from .planner import InvestmentPlan, evaluate_objective, plan, single_scenario
from .scenarios import LdSegment, ScenarioSet, generate


@dataclass
class StressedCase:
    """The stressed single-scenario setup: every load scaled by ``load_scale``."""

    case: str = "case30"
    load_scale: float = 1.05
    config: PlanConfig = field(default_factory=PlanConfig)

    def network(self) -> Network:
        return bundled_case(self.case)

    def scenarios(self, net: Network) -> ScenarioSet:
        return single_scenario(net, self.load_scale)


@dataclass
class RunResult:
    plan: InvestmentPlan
    iterations: int
    seconds: float

    def summary(self, net: Network) -> str:
        p = self.plan
        return (f"status={p.status} svc={ {k: round(v, 3) for k, v in p.svc_devices(net).items()} } "
                f"sc={ {k: round(v, 4) for k, v in p.sc_devices(net).items()} } "
                f"investment={p.investment_cost:.2f} $ operating={p.expected_operational_cost:.2f} $/h "
                f"total={p.total_cost:.2f} $ iterations={self.iterations} time={self.seconds:.1f} s")


def run(net: Network, scenarios, cfg: PlanConfig, init: str = "opf") -> RunResult:
    t0 = time.perf_counter()
    pl, trace = plan(net, scenarios, cfg, init=init)
    return RunResult(pl, len(trace), time.perf_counter() - t0)


def single_plan(setup: StressedCase | None = None) -> tuple[Network, RunResult]:
    """One stressed scenario with the default settings."""
    setup = setup or StressedCase()
    net = setup.network()
    return net, run(net, setup.scenarios(net), setup.config)


@dataclass
class DispatchComparison:
    free: RunResult
    frozen: RunResult

    @property
    def ratio(self) -> float:
        return self.frozen.plan.investment_cost / max(self.free.plan.investment_cost, 1e-9)


def frozen_vs_free_dispatch(setup: StressedCase | None = None) -> tuple[Network, DispatchComparison]:
    """Investment with generator dispatch and voltages held at the initial point versus free dispatch."""
    setup = setup or StressedCase()
    net = setup.network()
    ss = setup.scenarios(net)
    free = run(net, ss, setup.config)
    frozen = run(net, ss, replace(setup.config, freeze_dispatch=True))
    return net, DispatchComparison(free, frozen)


@dataclass
class HorizonComparison:
    horizon: int
    myopic: RunResult  # planned with n_years = 0
    long: RunResult  # planned with n_years = horizon
    myopic_total: float  # myopic plan's cost over the horizon
    long_total: float

    @property
    def gap(self) -> float:
        """Relative saving of the horizon-aware plan over the horizon."""
        return (self.myopic_total - self.long_total) / self.myopic_total


def horizon_comparison(setup: StressedCase | None = None, horizon: int = 10) -> tuple[Network, HorizonComparison]:
    """Plan once ignoring operating cost and once over ``horizon`` years; cost both over the horizon."""
    setup = setup or StressedCase()
    net = setup.network()
    ss = setup.scenarios(net)
    myopic = run(net, ss, replace(setup.config, n_years=0))
    long = run(net, ss, replace(setup.config, n_years=horizon))
    over = replace(setup.config, n_years=horizon)
    m_total = evaluate_objective(net, myopic.plan, myopic.plan.states, ss, over).total
    l_total = evaluate_objective(net, long.plan, long.plan.states, ss, over).total
    return net, HorizonComparison(horizon, myopic, long, m_total, l_total)


K_VALUES = (1, 5, 10, 20, 40)


def stressed_set(net: Network, k: int, seed: int = 0, level: float = 1.05, sigma: float = 0.02) -> ScenarioSet:
    """``k`` Gaussian perturbations of the stressed load, all in one year."""
    return generate(net, years=1, per_year=k, seed=seed, segments=[LdSegment(1, 100.0, level, sigma)])


@dataclass
class ScalingResult:
    ks: list[int]
    seconds: list[float]
    runs: list[RunResult]

    @property
    def slope(self) -> float:
        return loglog_slope(self.ks, self.seconds)


def loglog_slope(ks, seconds) -> float:
    """Least-squares slope of log(seconds) against log(k)."""
    return float(np.polyfit(np.log(ks), np.log(seconds), 1)[0])


def scaling(ks=K_VALUES, cfg: PlanConfig | None = None, seed: int = 0, progress=None) -> ScalingResult:
    """Wall-clock of the full planner (initialization included) for growing scenario counts."""
    cfg = cfg or PlanConfig()
    net = bundled_case("case30")
    runs = []
    for k in ks:
        r = run(net, stressed_set(net, k, seed), cfg)
        runs.append(r)
        if progress is not None:
            progress(k, r)
    return ScalingResult(list(ks), [r.seconds for r in runs], runs)
