"""Worst-case optimal investment on finite scenario trees with polytope priors."""

from __future__ import annotations

__version__ = "0.1.0"

from .arbitrage import (
    NAReport,
    NAVerdict,
    NodeGeometry,
    check_na_global,
    check_na_node,
    check_sna,
    compute_alpha,
    node_geometry,
    project_to_D,
)
from .dp_engine import (
    ConcaveValueTable,
    GridSpec,
    PolicyTrace,
    ValueSurface,
    backward_induct,
    build_grid,
    compute_J,
    diagnostics,
    extract_policy,
    robust_wealth_floor,
)
from .exceptions import (
    GridTooSmallError,
    LPSolverError,
    ModelError,
    OracleRefusal,
    PreconditionError,
    RobustDPError,
    TableShapeError,
    WealthFloorError,
)
from .generate import binomial_model, random_model, trinomial_model
from .market_model import (
    MarketModel,
    Node,
    PriorPolytope,
    RandomUtility,
    delta_s,
    nonpolar_mask,
    validate_model,
)
from .oracle import brute_force_value, fixed_strategy_worst_case
from .saddle import (
    OnePeriodProblem,
    SaddleSolution,
    inner_worst_case,
    rational_sup_check,
    solve_one_period,
)

__all__ = [name for name in dir() if not name.startswith("_") and name != "annotations"]
