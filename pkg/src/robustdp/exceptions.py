"""Exception hierarchy shared by the solver modules."""

from __future__ import annotations


class RobustDPError(Exception):
    """Base class for every error raised by the package."""


class ModelError(RobustDPError):
    """The model file or model object cannot be turned into a usable tree."""


class PreconditionError(RobustDPError):
    """An operation was called outside of its domain (e.g. at an arbitrage node)."""


class LPSolverError(RobustDPError):
    """The linear programming backend did not return an optimal solution."""


class GridTooSmallError(RobustDPError):
    """A value table was queried above its largest knot."""


class TableShapeError(RobustDPError):
    """A value table violates monotonicity or concavity."""


class WealthFloorError(RobustDPError):
    """Realized wealth fell below zero at a non-polar node."""


class OracleRefusal(RobustDPError):
    """The brute-force search would exceed its evaluation budget."""
