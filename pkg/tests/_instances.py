"""Shared test instances and cached solves.

Every expensive pipeline run is memoized per process so that the unit tests
and the acceptance suite reuse the same results.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from robustdp.arbitrage import NAReport, check_na_global
from robustdp.dp_engine import (
    GridSpec,
    PolicyTrace,
    ValueSurface,
    backward_induct,
    build_grid,
    extract_policy,
)
from robustdp.generate import binomial_model, random_model
from robustdp.market_model import MarketModel

RANDOM_SEEDS = tuple(range(50))
# criterion number -> one-line verdict, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}
ORACLE_SEEDS = tuple(range(20))
RATIONAL_SEEDS = tuple(range(20))

# one-period closed forms used as independent references
BIN1_VALUE = 0.4 * math.log(1.2) + 0.6 * math.log(0.9)
KELLY_VALUE = 0.5 * math.log(1.5) + 0.5 * math.log(0.75)


def bin1() -> MarketModel:
    """One period, S: 1 -> {2, 1/2}, up-probability in [0.4, 0.6], log utility."""
    return binomial_model(1, 2.0, 0.5, 0.4, 0.6)


def bin2() -> MarketModel:
    """Two proportional periods of :func:`bin1`."""
    return binomial_model(2, 2.0, 0.5, 0.4, 0.6)


def from_doc(nodes, priors, *, d=1, utility=None, horizon=None) -> MarketModel:
    """Build a model from ``(id, parent, prices)`` triples."""
    depth = {}
    rows = []
    for nid, parent, prices in nodes:
        depth[nid] = 0 if parent is None else depth[parent] + 1
        rows.append({"id": nid, "parent": parent, "depth": depth[nid], "prices": list(np.atleast_1d(prices))})
    return MarketModel.from_dict(
        {
            "horizon": horizon if horizon is not None else max(depth.values()),
            "asset_count": d,
            "price_floor": 0.0,
            "nodes": rows,
            "priors": priors,
            "utility": utility or {"family": "log"},
        }
    )


def one_sided() -> MarketModel:
    """Support ``{+1, 0}``: buying the asset never loses and may gain."""
    return from_doc(
        [("root", None, 1.0), ("u", "root", 2.0), ("m", "root", 1.0)],
        {"root": [[0.5, 0.5]]},
    )


def flat_tree() -> MarketModel:
    """Two periods where the price never moves."""
    return from_doc(
        [("root", None, 1.0), ("a", "root", 1.0), ("b", "root", 1.0),
         ("aa", "a", 1.0), ("ab", "a", 1.0), ("ba", "b", 1.0), ("bb", "b", 1.0)],
        {"root": [[0.3, 0.7], [0.6, 0.4]], "a": [[0.5, 0.5]], "b": [[0.2, 0.8], [0.9, 0.1]]},
        utility={"family": "log", "per_leaf": {"aa": {"weight": 2.0}, "bb": {"shift": 0.5}}},
    )


@dataclass(frozen=True, eq=False)
class Solved:
    model: MarketModel
    report: NAReport
    surface: ValueSurface
    trace: PolicyTrace


def solve(model: MarketModel, x0: float = 1.0, knots: int = 257) -> Solved:
    report = check_na_global(model)
    grid = build_grid(model, x0, report, GridSpec(n_knots=knots))
    surface = backward_induct(model, report, grid)
    return Solved(model, report, surface, extract_policy(model, surface, x0))


@functools.lru_cache(maxsize=None)
def solved_named(name: str) -> Solved:
    return solve({"bin1": bin1, "bin2": bin2, "flat": flat_tree}[name]())


@functools.lru_cache(maxsize=None)
def solved_random(seed: int) -> Solved:
    """Seeded arbitrage-free random instance (T <= 2, d <= 2), solved from x0 = 1."""
    return solve(random_model(seed))
