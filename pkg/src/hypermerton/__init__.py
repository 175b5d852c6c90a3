"""Consumption and portfolio rules under non-constant discounting in the Merton model."""

from . import analysis, closed_policies, discount, market, mpe_oracle, simulator, soph_solver
from .analysis import build_policy, compare_agents, infinite_horizon_propensities
from .closed_policies import AgentKind, ConstantRate, Grid, Policy, closed_form_policy
from .discount import BarroExp, Constant, ExpMixture, Tabulated
from .market import ExponentialUtility, LogUtility, MarketModel, PowerUtility
from .soph_solver import SolverConfig

__all__ = [
    "analysis", "closed_policies", "discount", "market", "mpe_oracle", "simulator", "soph_solver",
    "build_policy", "compare_agents", "infinite_horizon_propensities",
    "AgentKind", "ConstantRate", "Grid", "Policy", "closed_form_policy",
    "BarroExp", "Constant", "ExpMixture", "Tabulated",
    "ExponentialUtility", "LogUtility", "MarketModel", "PowerUtility", "SolverConfig",
]
