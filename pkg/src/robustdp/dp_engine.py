"""Backward induction of robust value functions and forward policy extraction.

Value functions are stored as concave, non-decreasing piecewise-linear tables
on a per-depth wealth grid. Each internal node's table is filled by solving
the one-period worst-case problem at every knot against its children's
tables (or the exact utility when the children are leaves). The optimal
strategy is then read off by re-solving at the realized wealth of every
node, refining the children's tables along the realized path until the
root value agrees with the exact worst-case value of the extracted strategy.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.optimize import linprog

from .arbitrage import NAReport
from .exceptions import (
    GridTooSmallError,
    LPSolverError,
    PreconditionError,
    RobustDPError,
    TableShapeError,
    WealthFloorError,
)
from .market_model import MarketModel, delta_s
from .saddle import OnePeriodProblem, solve_batch, solve_one_period

VALUE_TOL = 1e-9
RANGE_TOL = 1e-9
WEALTH_FLOOR = -1e-10
KNOT_MERGE = 1e-9


def _value_tol(v: np.ndarray) -> np.ndarray:
    return VALUE_TOL * (1.0 + np.abs(v))


@dataclass(frozen=True, eq=False)
class ConcaveValueTable:
    """Piecewise-linear value function on ``0 = x_0 < x_1 < ... < x_K``.

    ``values[0]`` may be ``-inf``; then the table is ``-inf`` on ``[0, x_1)``.
    Queries below 0 give ``-inf``; queries above ``x_K`` raise.
    """

    knots: np.ndarray
    values: np.ndarray
    check: bool = True

    def __post_init__(self) -> None:
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)
        if k.ndim != 1 or k.shape != v.shape or len(k) < 2:
            raise TableShapeError("knots and values must be 1-D arrays of equal length >= 2")
        if k[0] != 0 or np.any(np.diff(k) <= 0):
            raise TableShapeError("knots must start at 0 and increase strictly")
        if np.any(np.isnan(v)) or np.any(v[1:] == -np.inf) or np.any(v == np.inf):
            raise TableShapeError("values must be finite except possibly -inf at x = 0")
        if self.check:
            if not self.is_monotone():
                raise TableShapeError("table is not non-decreasing")
            if not self.is_concave():
                raise TableShapeError("table is not concave")

    @property
    def upper(self) -> float:
        return float(self.knots[-1])

    def _finite_part(self) -> tuple[np.ndarray, np.ndarray]:
        if np.isfinite(self.values[0]):
            return self.knots, self.values
        return self.knots[1:], self.values[1:]

    def is_monotone(self) -> bool:
        _, v = self._finite_part()
        return bool(np.all(np.diff(v) >= -_value_tol(v[1:])))

    def is_concave(self) -> bool:
        k, v = self._finite_part()
        if len(k) < 3:
            return True
        lam = (k[1:-1] - k[:-2]) / (k[2:] - k[:-2])
        chord = (1 - lam) * v[:-2] + lam * v[2:]
        return bool(np.all(v[1:-1] >= chord - _value_tol(v[1:-1])))

    def __call__(self, x: np.ndarray | float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(x > self.upper * (1 + RANGE_TOL)):
            raise GridTooSmallError(
                f"wealth {float(np.max(x))!r} above the table range {self.upper!r}"
            )
        k, v = self._finite_part()
        out = np.interp(np.minimum(x, self.upper), k, v)
        out = np.where(x < k[0], -np.inf, out)
        if np.isfinite(self.values[0]):
            return np.where(x < 0, -np.inf, out)
        return np.where(x == 0, self.values[0], out)

    def with_knot(self, w: float, v: float) -> "ConcaveValueTable":
        """Insert (or move the nearest knot to) ``(w, v)``.

        The value is clamped between the chord of its neighbours and the
        extensions of the adjacent segments, so the table stays concave and
        non-decreasing.
        """
        if not 0 < w <= self.upper * (1 + RANGE_TOL):
            return self
        w = min(w, self.upper)
        k, vals = self.knots.copy(), self.values.copy()
        i = int(np.argmin(np.abs(k - w)))
        if abs(k[i] - w) <= KNOT_MERGE * max(1.0, w) and i > 0:
            k = np.delete(k, i)
            vals = np.delete(vals, i)
        j = int(np.searchsorted(k, w))
        has_l, has_r = j >= 1, j < len(k)
        lo, hi = -np.inf, np.inf
        if has_l and has_r and np.isfinite(vals[j - 1]):
            lam = (w - k[j - 1]) / (k[j] - k[j - 1])
            lo = (1 - lam) * vals[j - 1] + lam * vals[j]
        elif has_l and not has_r:
            lo = vals[j - 1]
        if has_r:
            hi = vals[j]
            if j + 1 < len(k):
                s = (vals[j + 1] - vals[j]) / (k[j + 1] - k[j])
                hi = min(hi, vals[j] + s * (w - k[j]))
        if j >= 2 and np.isfinite(vals[j - 2]):
            s = (vals[j - 1] - vals[j - 2]) / (k[j - 1] - k[j - 2])
            hi = min(hi, vals[j - 1] + s * (w - k[j - 1]))
        v = float(min(max(v, lo), hi)) if lo <= hi else float(lo)
        k = np.insert(k, j, w)
        vals = np.insert(vals, j, v)
        return ConcaveValueTable(k, vals, check=False)


@dataclass(frozen=True)
class GridSpec:
    """Wealth grid configuration.

    Attributes:
        n_knots: Target number of knots per depth.
        inflate: Safety factor on the reachable wealth bound.
        bound: ``"tight"`` (LP reach per node) or ``"product"``
            (``prod(1 + max|dS|/alpha)``).
        geometric: Number of halvings of the depth-0 bound used as the
            smallest positive knot.
    """

    n_knots: int = 257
    inflate: float = 1.25
    bound: str = "tight"
    geometric: int = 20


@dataclass(frozen=True, eq=False)
class WealthGrid:
    """Per-depth knots and bounds."""

    knots: Mapping[int, np.ndarray]
    upper: Mapping[int, float]
    tight_bound: Mapping[int, float]
    product_bound: Mapping[int, float]
    spec: GridSpec


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Value tables for every non-polar node."""

    tables: Mapping[str, ConcaveValueTable]
    grid: WealthGrid
    report: NAReport

    def value(self, node: str, x: float) -> float:
        return float(self.tables[node](x))


@dataclass(frozen=True)
class PolicyRecord:
    """Realized state and decision at one node of the trace."""

    node: str
    depth: int
    wealth: float
    h: tuple[float, ...] | None
    worst_vertex: int | None
    continuation_value: float


@dataclass(frozen=True, eq=False)
class PolicyTrace:
    """Optimal strategy along every non-polar node.

    Attributes:
        records: Node id to record, in visiting order.
        value: Root value ``U_0(x0)``.
        surface: Value tables after path refinement.
        converged: Path refinement reached its fixpoint everywhere.
        x0: Initial wealth.
    """

    records: Mapping[str, PolicyRecord]
    value: float
    surface: ValueSurface | None
    converged: bool
    x0: float

    def profile(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(r.h) for k, r in self.records.items() if r.h is not None}

    @classmethod
    def from_profile(
        cls, model: MarketModel, profile: Mapping[str, Iterable[float]], x0: float,
        nonpolar: Mapping[str, bool] | None = None,
    ) -> "PolicyTrace":
        """Trace of an arbitrage-unaware, hand-specified strategy (no values)."""
        recs: dict[str, PolicyRecord] = {}
        stack = [(model.root, float(x0))]
        while stack:
            node, X = stack.pop()
            if nonpolar is not None and not nonpolar[node]:
                continue
            n = model.node(node)
            if model.is_leaf(node):
                recs[node] = PolicyRecord(node, n.depth, X, None, None, math.nan)
                continue
            h = np.asarray(profile.get(node, np.zeros(model.asset_count)), dtype=float)
            recs[node] = PolicyRecord(node, n.depth, X, tuple(h), None, math.nan)
            for c, dS in reversed(delta_s(model, node)):
                stack.append((c, X + float(h @ dS)))
        return cls(recs, math.nan, None, False, float(x0))


# grid


def _reach(Z: np.ndarray) -> float:
    """``max_j max_{u : 1 + u.z >= 0} u.z_j``: worst wealth growth per unit."""
    J, m = Z.shape
    if m == 0:
        return 0.0
    best = 0.0
    for j in range(J):
        res = linprog(-Z[j], A_ub=-Z, b_ub=np.ones(J), bounds=[(None, None)] * m, method="highs")
        if res.status == 3:
            raise PreconditionError("unbounded reach: no-arbitrage fails")
        if res.status != 0:
            raise LPSolverError(f"reach LP failed: {res.message}")
        best = max(best, -res.fun)
    return best


def build_grid(
    model: MarketModel, x0: float, na_report: NAReport, spec: GridSpec = GridSpec()
) -> WealthGrid:
    """Per-depth wealth bounds and knots covering every reachable wealth."""
    if not na_report.na_qT:
        raise PreconditionError("no-arbitrage fails; the wealth grid is unbounded")
    if x0 < 0:
        raise PreconditionError("initial wealth must be >= 0")
    if spec.n_knots < 17:
        raise ValueError("at least 17 knots are required")
    base = x0 if x0 > 0 else 1e-6
    tight = {0: base}
    prod = {0: base}
    for t in range(model.horizon):
        g_t, g_p = 1.0, 1.0
        for node in model.nodes_at_depth(t):
            rep = na_report.nodes.get(node)
            if rep is None:
                continue
            margin = rep.verdict.margin
            if margin is None or margin.alpha_cert <= 0:
                raise RobustDPError(f"node {node!r}: no positive margin")
            Z = rep.geometry.coordinates()
            g_t = max(g_t, 1.0 + _reach(Z))
            dmax = float(np.max(np.linalg.norm(rep.geometry.support_points, axis=1)))
            g_p = max(g_p, 1.0 + dmax / margin.alpha_cert)
        tight[t + 1] = tight[t] * g_t
        prod[t + 1] = prod[t] * g_p
    chosen = tight if spec.bound == "tight" else prod
    upper = {t: chosen[t] * spec.inflate for t in chosen}
    smallest = upper[0] * 2.0 ** -spec.geometric
    n_lin = max(spec.n_knots - spec.geometric, 2)
    knots = {}
    for t, up in upper.items():
        geo = smallest * 2.0 ** np.arange(0, 64)
        geo = geo[geo < up]
        knots[t] = np.unique(np.concatenate([np.linspace(0.0, up, n_lin), geo]))
    return WealthGrid(knots, upper, tight, prod, spec)


# backward induction


def node_problem(
    model: MarketModel,
    na_report: NAReport,
    node: str,
    x: float,
    next_value: Mapping[str, Callable[[np.ndarray], np.ndarray]],
) -> OnePeriodProblem:
    """Assemble the one-period problem at ``node`` from a continuation map."""
    rep = na_report.nodes[node]
    geom = rep.geometry
    if not rep.verdict.holds:
        raise PreconditionError(f"no-arbitrage fails at node {node!r}")
    cols = [model.children(node).index(c) for c in geom.children]
    P = model.vertices(node)[:, cols]
    return OnePeriodProblem(
        outcomes=geom.support_points,
        vertices=P,
        next_value=tuple(next_value[c] for c in geom.children),
        x=float(x),
        alpha=rep.verdict.margin.alpha_cert,
        geometry=geom,
        children=geom.children,
    )


def _continuations(model: MarketModel, node: str, tables: Mapping[str, ConcaveValueTable]):
    out = {}
    for c in model.children(node):
        if model.is_leaf(c):
            out[c] = model.utility.leaf_function(c)
        elif c in tables:
            out[c] = tables[c]
    return out


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get("ROBUSTDP_THREADS", "1") or 1)
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def backward_induct(
    model: MarketModel, na_report: NAReport, grid: WealthGrid, *, workers: int | None = None
) -> ValueSurface:
    """Fill value tables from the leaves to the root."""
    if not na_report.na_qT:
        raise PreconditionError("no-arbitrage fails; backward induction is undefined")
    mask = na_report.mask
    tables: dict[str, ConcaveValueTable] = {}
    T = model.horizon
    for leaf in model.nodes_at_depth(T):
        if mask[leaf]:
            k = grid.knots[T]
            tables[leaf] = ConcaveValueTable(k, model.utility.evaluate(leaf, k))
    n_workers = worker_count(workers)

    for t in range(T - 1, -1, -1):
        k = grid.knots[t]
        nodes = [n for n in model.nodes_at_depth(t) if mask[n] and not model.is_leaf(n)]

        def solve_node(node: str) -> tuple[str, ConcaveValueTable]:
            prob = node_problem(model, na_report, node, 0.0, _continuations(model, node, tables))
            vals, _, _, _ = solve_batch(prob, k, tie_break=False)
            return node, ConcaveValueTable(k, vals)

        if n_workers > 1 and len(nodes) > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                done = list(pool.map(solve_node, nodes))
        else:
            done = [solve_node(n) for n in nodes]
        # barrier: depth t only reads depth t + 1
        tables.update(dict(done))
    return ValueSurface(tables, grid, na_report)


# forward extraction


def _local_spacing(table: ConcaveValueTable, w: float) -> float:
    k = table.knots
    j = int(np.clip(np.searchsorted(k, w), 1, len(k) - 1))
    left = k[j] - k[j - 1]
    right = k[j + 1] - k[j] if j + 1 < len(k) else left
    return float(max(left, right))


def _merge_samples(table: ConcaveValueTable, ws: np.ndarray, vs: np.ndarray) -> ConcaveValueTable:
    """Replace the knots inside ``[ws.min(), ws.max()]`` by exact samples."""
    k, v = table.knots, table.values
    keep = (k < ws[0]) | (k > ws[-1])
    keep[0] = True
    kk = np.concatenate([k[keep], ws])
    vv = np.concatenate([v[keep], vs])
    order = np.argsort(kk, kind="stable")
    kk, vv = kk[order], vv[order]
    ok = np.concatenate([[True], np.diff(kk) > KNOT_MERGE * np.maximum(1.0, kk[1:])])
    return ConcaveValueTable(kk[ok], vv[ok])


def extract_policy(
    model: MarketModel,
    surface: ValueSurface,
    x0: float,
    *,
    refine: bool = True,
    max_rounds: int = 30,
    window_points: int = 33,
    fine_spacing: float = 1e-6,
) -> PolicyTrace:
    """Optimal strategy at every non-polar node, re-solved at realized wealth.

    With ``refine`` each internal child's table is resampled on a shrinking
    window of exact solves around the realized child wealth until the local
    knot spacing is below ``fine_spacing * max(1, w)``; the node is re-solved
    after every resampling. The child's own path value (obtained by
    recursing below it) is then stored as a knot, so that the recorded value
    at every node equals the worst-case value of the extracted strategy
    from that node on.

    Raises:
        WealthFloorError: if wealth at a non-polar node is below ``-1e-10``.
    """
    report = surface.report
    mask = report.mask
    tables = dict(surface.tables)
    converged = [True]

    def resample(c: str, w: float) -> bool:
        tab = tables[c]
        sp = _local_spacing(tab, w)
        if sp <= fine_spacing * max(1.0, w) or w <= 0:
            return False
        half = 2.0 * sp
        lo, hi = max(w - half, tab.knots[1] * 0.5), min(w + half, tab.upper)
        ws = np.linspace(lo, hi, window_points)
        prob = node_problem(model, report, c, 0.0, _continuations(model, c, tables))
        vs, _, _, _ = solve_batch(prob, ws, tie_break=False)
        tables[c] = _merge_samples(tab, ws, vs)
        return True

    def visit(node: str, X: float) -> tuple[float, dict[str, PolicyRecord]]:
        depth = model.node(node).depth
        if X < WEALTH_FLOOR:
            raise WealthFloorError(f"wealth {X!r} < 0 at non-polar node {node!r}")
        Xc = max(X, 0.0)
        if model.is_leaf(node):
            v = float(model.utility.evaluate(node, Xc))
            return v, {node: PolicyRecord(node, depth, X, None, None, v)}
        geom = report.nodes[node].geometry
        inc = dict(delta_s(model, node))
        inner = [c for c in geom.children if not model.is_leaf(c)]
        for _ in range(max_rounds):
            prob = node_problem(model, report, node, Xc, _continuations(model, node, tables))
            sol = solve_one_period(prob)
            h = sol.h_opt
            wealth = {c: X + float(h @ inc[c]) for c in geom.children}
            if refine and any([resample(c, wealth[c]) for c in inner]):
                continue
            recs: dict[str, PolicyRecord] = {}
            changed = False
            for c in geom.children:
                vc, sub = visit(c, wealth[c])
                recs.update(sub)
                if refine and c in inner and wealth[c] > 0:
                    tab = tables[c]
                    new = tab.with_knot(wealth[c], vc)
                    if abs(float(new(wealth[c])) - float(tab(wealth[c]))) > VALUE_TOL * (1 + abs(vc)):
                        changed = True
                    tables[c] = new
            if not changed:
                break
        else:
            converged[0] = False
        rec = PolicyRecord(node, depth, X, tuple(float(v) for v in h), sol.worst_vertex, sol.value)
        return sol.value, {node: rec, **recs}

    value, recs = visit(model.root, float(x0))
    root_tab = tables.get(model.root)
    if refine and root_tab is not None and x0 > 0 and math.isfinite(value):
        tables[model.root] = root_tab.with_knot(float(x0), value)
    refined = ValueSurface(tables, surface.grid, report)
    return PolicyTrace(recs, value, refined, converged[0], float(x0))


def robust_wealth_floor(model: MarketModel, trace: PolicyTrace) -> bool:
    """True iff realized wealth is >= -1e-10 at every recorded node."""
    return all(r.wealth >= WEALTH_FLOOR for r in trace.records.values())


# diagnostics


@dataclass(frozen=True)
class ElasticityReport:
    pairs: int
    passed: bool
    worst_margin: float
    failures: tuple[tuple[float, float, str], ...] = ()


@dataclass(frozen=True, eq=False)
class DiagnosticsTable:
    """Integrability and growth diagnostics.

    Attributes:
        J: ``r`` to node to ``J^r`` at that node.
        assumption2: ``J^r`` at the root is finite for every probed ``r``.
        elasticity: Outcome of the sampled growth inequality.
        m_x: Brute-force estimate of the largest single-prior expected
            positive utility from unit wealth (``inf`` if some vertex
            selection admits arbitrage), or ``None`` when not computed.
        m_finite: ``m_x`` is finite.
    """

    J: Mapping[Fraction, Mapping[str, float]]
    assumption2: bool
    elasticity: ElasticityReport | None = None
    m_x: float | None = None
    m_finite: bool | None = None
    notes: tuple[str, ...] = field(default=())


def _as_rational(r) -> Fraction:
    q = Fraction(r).limit_denominator(10**12) if not isinstance(r, Fraction) else r
    if q <= 0:
        raise ValueError(f"r must be a positive rational, got {r!r}")
    return q


def compute_J(model: MarketModel, r_set: Iterable) -> dict[Fraction, dict[str, float]]:
    """Backward recursion of the worst-case expected negative utility at wealth ``r``.

    Leaves carry ``U^-(leaf, r)``; an internal node takes the largest vertex
    expectation of its children's values.

    Raises:
        ValueError: if some ``r <= 0``.
    """
    rs = [_as_rational(r) for r in r_set]
    out: dict[Fraction, dict[str, float]] = {}
    order = sorted(model.nodes, key=lambda n: -n.depth)
    for r in rs:
        J: dict[str, float] = {}
        for n in order:
            kids = model.children(n.id)
            if not kids:
                J[n.id] = model.utility.negative_part(n.id, float(r))
                continue
            v = np.array([J[c] for c in kids])
            P = model.vertices(n.id)
            # v_min + E[v - v_min] propagates constants exactly
            vmin = float(v.min())
            J[n.id] = float(vmin + np.max(P @ (v - vmin)))
        out[r] = J
    return out


def check_elasticity(
    model: MarketModel, pairs: int = 1000, seed: int = 0, *, lam_max: float = 10.0
) -> ElasticityReport:
    """Sample ``U(lam*x) <= 2*lam*(U(x + 1/2) + U^-(1/4))`` on every leaf.

    ``lam`` is drawn from ``[1, lam_max]`` and ``x`` from ``[-1, 10]``.
    """
    rng = np.random.default_rng(seed)
    lam = rng.uniform(1.0, lam_max, pairs)
    x = rng.uniform(-1.0, 10.0, pairs)
    worst = math.inf
    fails = []
    u = model.utility
    for leaf in model.leaves:
        C = u.negative_part(leaf, 0.25)
        lhs = u.evaluate(leaf, lam * x)
        rhs = 2 * lam * (u.evaluate(leaf, x + 0.5) + C)
        with np.errstate(invalid="ignore"):
            margin = rhs - lhs
        both_inf = np.isneginf(lhs) & np.isneginf(rhs)
        margin = np.where(both_inf | np.isneginf(lhs), np.inf, margin)
        tol = 1e-12 * (1 + np.abs(np.where(np.isfinite(lhs), lhs, 0.0)))
        bad = margin < -tol
        worst = min(worst, float(np.min(margin)))
        fails.extend((float(a), float(b), leaf) for a, b in zip(lam[bad], x[bad]))
    return ElasticityReport(pairs, not fails, worst, tuple(fails[:10]))


def diagnostics(
    model: MarketModel,
    r_set: Iterable = (Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2)),
    *,
    pairs: int = 1000,
    seed: int = 0,
    m_x: bool = True,
    max_selections: int = 16,
) -> DiagnosticsTable:
    """J^r table, growth inequality check and the positive-part surrogate."""
    J = compute_J(model, r_set)
    root = model.root
    a2 = all(math.isfinite(J[r][root]) for r in J)
    el = check_elasticity(model, pairs, seed)
    mval = mfin = None
    notes = []
    if m_x:
        from .oracle import estimate_m_x

        try:
            mval = estimate_m_x(model, 1.0, max_selections=max_selections, seed=seed)
            mfin = math.isfinite(mval)
        except RobustDPError as exc:
            notes.append(f"M_x not estimated: {exc}")
    return DiagnosticsTable(J, a2, el, mval, mfin, tuple(notes))
