"""Planning of SVC and series-compensation investments on AC networks.

The pipeline is: parse a case (:mod:`grid`), sample load scenarios
(:mod:`scenarios`), initialize each scenario's dispatch (:mod:`initializer`)
and run the sequential QP planner (:mod:`planner`).
"""

from .acpf import PowerFlowError, SystemState, solve_pf
from .grid import CaseError, CaseSyntaxError, CaseValidationError, Network, bundled_case, load_case, parse_case
from .linearize import PlanConfig
from .planner import InvestmentPlan, check_feasibility, evaluate_objective, plan
from .scenarios import Scenario, ScenarioSet, default_ld_table, generate

__version__ = "0.1.0"

__all__ = [
    "CaseError",
    "CaseSyntaxError",
    "CaseValidationError",
    "InvestmentPlan",
    "Network",
    "PlanConfig",
    "PowerFlowError",
    "Scenario",
    "ScenarioSet",
    "SystemState",
    "bundled_case",
    "check_feasibility",
    "default_ld_table",
    "evaluate_objective",
    "generate",
    "load_case",
    "parse_case",
    "plan",
    "solve_pf",
]
