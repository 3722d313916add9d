"""One-period worst-case problem at a single node.

Given wealth ``x``, outcomes ``y_j`` of the price increment, prior vertices
``P_k`` and continuation values ``V_j``, solve

    v(x) = sup_{h in D_x} min_k sum_j P_kj V_j(x + h.y_j),

where ``D_x`` is the set of positions in the span of the support that keep
wealth non-negative at every outcome. The objective is concave in ``h``, so
the search runs in coordinates of the span: a coarse scan finds a finite
anchor, then golden-section brackets (or, for small batches, a 16-point
zoom) refine it, one coordinate at a time. Every search is batched over
rows so that a whole wealth grid is solved at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .arbitrage import NodeGeometry, project_to_D
from .exceptions import LPSolverError, PreconditionError

FEAS_TOL = 1e-10
REL_WIDTH = 1e-11
SCAN_POINTS = 17
MAX_ITER = 10_000
FLAT_TOL = 1e-15
INVPHI = (math.sqrt(5) - 1) / 2
ZOOM_POINTS = 16
ZOOM_ROWS = 1024

ValueFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class OnePeriodProblem:
    """Inputs of a one-period solve.

    Attributes:
        outcomes: ``(J, d)`` increments toward the non-polar children.
        vertices: ``(K, J)`` prior vertices restricted to those children.
        next_value: One vectorized continuation value per child.
        x: Wealth at the node.
        alpha: Certified margin, used for the search box ``|h| <= x/alpha``.
        geometry: Support geometry at the node.
        children: Child identifiers, for reporting.
    """

    outcomes: np.ndarray
    vertices: np.ndarray
    next_value: tuple[ValueFn, ...]
    x: float
    alpha: float
    geometry: NodeGeometry
    children: tuple[str, ...] = ()

    def at(self, x: float) -> "OnePeriodProblem":
        """Same node and continuation, different wealth."""
        return OnePeriodProblem(
            self.outcomes, self.vertices, self.next_value, float(x), self.alpha,
            self.geometry, self.children,
        )


@dataclass(frozen=True, eq=False)
class SaddleSolution:
    """Result of :func:`solve_one_period`.

    Attributes:
        value: Optimal worst-case value (may be ``-inf``).
        h_opt: Optimal position in ``R^d``, inside the span of the support.
        worst_vertex: Index of a minimizing vertex at ``h_opt``.
        iterations: Outer search iterations.
        gap: Estimated value gap of the final bracket (NaN if unknown).
        degenerate: The objective was ``-inf`` everywhere.
        nonunique: The tie-break moved the optimizer toward the origin.
    """

    value: float
    h_opt: np.ndarray
    worst_vertex: int | None
    iterations: int = 0
    gap: float = 0.0
    degenerate: bool = False
    nonunique: bool = False


class WorstCaseObjective:
    """Batched evaluation of ``u -> min_k E_k V(x + u.z)`` in span coordinates."""

    def __init__(self, Z: np.ndarray, P: np.ndarray, funcs: Sequence[ValueFn]):
        self.Z = np.asarray(Z, dtype=float)
        self.P = np.asarray(P, dtype=float)
        self.charged = (self.P > 0).astype(float)
        self.funcs = tuple(funcs)

    def wealth(self, x: np.ndarray, U: np.ndarray) -> np.ndarray:
        return x[:, None] + U @ self.Z.T

    def __call__(self, x: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        W = self.wealth(x, U)
        infeasible = np.any(W < -FEAS_TOL * np.maximum(1.0, np.abs(x))[:, None], axis=1)
        W = np.maximum(W, 0.0)
        W[infeasible] = 0.0
        V = np.empty_like(W)
        for j, f in enumerate(self.funcs):
            V[:, j] = f(W[:, j])
        return self._reduce(V, infeasible)

    def _reduce(self, V: np.ndarray, infeasible: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        finite = np.isfinite(V)
        E = np.where(finite, V, 0.0) @ self.P.T
        # 0 * (-inf) counts as 0: only charged -inf outcomes poison a vertex
        bad = (~finite).astype(float) @ self.charged.T > 0
        E[bad] = -np.inf
        arg = np.argmin(E, axis=1)
        vals = E[np.arange(E.shape[0]), arg]
        vals[infeasible] = -np.inf
        return vals, arg


def _unit_bounds(Z: np.ndarray) -> tuple[float, float]:
    """Range of the first coordinate over ``{u : 1 + u.z_j >= 0}``."""
    m = Z.shape[1]
    out = []
    for sign in (1.0, -1.0):
        c = np.zeros(m)
        c[0] = sign
        res = linprog(c, A_ub=-Z, b_ub=np.ones(Z.shape[0]), bounds=[(None, None)] * m, method="highs")
        if res.status == 3:
            raise PreconditionError("feasible positions are unbounded: no-arbitrage fails")
        if res.status != 0:
            raise LPSolverError(f"bounding LP failed: {res.message}")
        out.append(sign * res.fun)
    return out[0], out[1]


class _NestedSearch:
    """Coordinate-nested maximization of a concave objective over ``x * D_1``."""

    def __init__(self, obj: WorstCaseObjective):
        self.obj = obj
        Z = obj.Z
        self.m = Z.shape[1]
        zmax = float(np.max(np.abs(Z))) if Z.size else 0.0
        self.ztol = 1e-12 * zmax
        self.unit = _unit_bounds(Z) if self.m >= 2 else None
        if self.m >= 2:
            self.unit_width = self.unit[1] - self.unit[0]
        else:
            z = Z[:, 0]
            self.unit_width = float(np.min(1 / -z[z < -self.ztol]) + np.min(1 / z[z > self.ztol]))

    # bounds of coordinate l given the first l coordinates
    def bounds(self, l: int, x: np.ndarray, prefix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Z = self.obj.Z
        if l == 0 and self.m >= 2:
            return x * self.unit[0], x * self.unit[1]
        c = x[:, None] + prefix @ Z[:, :l].T  # slack before coordinate l
        if l == self.m - 1:
            z = Z[:, l]
            lo = np.full(len(x), -np.inf)
            hi = np.full(len(x), np.inf)
            pos, neg, flat = z > self.ztol, z < -self.ztol, np.abs(z) <= self.ztol
            if pos.any():
                lo = np.max(-c[:, pos] / z[pos], axis=1)
            if neg.any():
                hi = np.min(c[:, neg] / -z[neg], axis=1)
            bad = np.zeros(len(x), dtype=bool)
            if flat.any():
                bad = np.any(c[:, flat] < -FEAS_TOL * np.maximum(1.0, np.abs(x))[:, None], axis=1)
            if not (pos.any() and neg.any()):
                raise PreconditionError("feasible positions are unbounded: no-arbitrage fails")
            lo = np.where(bad, np.inf, lo)
            hi = np.where(bad, -np.inf, hi)
            return lo, hi
        lo = np.empty(len(x))
        hi = np.empty(len(x))
        rest = Z[:, l:]
        k = rest.shape[1]
        for i in range(len(x)):
            vals = []
            for sign in (1.0, -1.0):
                cc = np.zeros(k)
                cc[0] = sign
                res = linprog(cc, A_ub=-rest, b_ub=c[i], bounds=[(None, None)] * k, method="highs")
                if res.status == 2:
                    vals = [np.inf, -np.inf]
                    break
                if res.status == 3:
                    raise PreconditionError("feasible positions are unbounded: no-arbitrage fails")
                if res.status != 0:
                    raise LPSolverError(f"slice LP failed: {res.message}")
                vals.append(sign * res.fun)
            lo[i], hi[i] = vals
        return lo, hi

    def evaluate(self, l: int, x: np.ndarray, pts: np.ndarray):
        """Value of the best completion of the first ``l + 1`` coordinates."""
        if l == self.m - 1:
            vals, arg = self.obj(x, pts)
            return vals, pts, arg
        # the origin is feasible at every level; it anchors slices whose scan
        # sees only -inf (finite values confined to a tiny set around 0)
        return self.solve(l + 1, x, pts, anchor=np.zeros(len(x)))

    def solve(self, l: int, x: np.ndarray, prefix: np.ndarray, anchor: np.ndarray | None = None):
        B = len(x)
        m = self.m
        lo, hi = self.bounds(l, x, prefix)
        slack = 1e-12 * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
        empty = ~(lo <= hi + slack)
        lo = np.where(empty, 0.0, lo)
        hi = np.where(empty, 0.0, np.maximum(hi, lo))

        best_v = np.full(B, -np.inf)
        best_u = np.zeros((B, m))
        best_a = np.zeros(B, dtype=int)

        def run(pts_last: np.ndarray, rows: np.ndarray):
            pts = np.concatenate([prefix[rows], pts_last[:, None]], axis=1)
            v, u, a = self.evaluate(l, x[rows], pts)
            v = np.where(empty[rows], -np.inf, v)
            better = v > best_v[rows]
            idx = rows[better]
            best_v[idx] = v[better]
            best_u[idx] = u[better]
            best_a[idx] = a[better]
            return v

        allrows = np.arange(B)
        # coarse scan to find a finite anchor and a bracket around it
        grid = np.linspace(0.0, 1.0, SCAN_POINTS)
        t = lo[:, None] + (hi - lo)[:, None] * grid[None, :]
        flat = t.reshape(-1)
        rows = np.repeat(allrows, SCAN_POINTS)
        vals = run(flat, rows).reshape(B, SCAN_POINTS)
        i = np.argmax(vals, axis=1)
        anchor_t = t[allrows, i]
        have = np.isfinite(vals[allrows, i])
        if anchor is not None:
            # rows with nothing finite on the scan fall back to the anchor
            miss = ~have & (anchor >= lo) & (anchor <= hi)
            if miss.any():
                rows = allrows[miss]
                v = run(anchor[miss], rows)
                anchor_t = np.where(miss, anchor, anchor_t)
                have = have | (miss & np.isfinite(best_v))
                # bracket the anchor by its scan neighbours
                pos = np.clip(np.searchsorted(grid, (anchor - lo) / np.where(hi > lo, hi - lo, 1.0)), 1, SCAN_POINTS - 1)
                i = np.where(miss, pos, i)
        a = t[allrows, np.clip(i - 1, 0, SCAN_POINTS - 1)]
        b = t[allrows, np.clip(i + 1, 0, SCAN_POINTS - 1)]
        a = np.where(have, a, anchor_t)
        b = np.where(have, b, anchor_t)

        # absolute stopping width: relative to the whole box, not the slice
        stop = REL_WIDTH * np.abs(x) * self.unit_width
        if B * ZOOM_POINTS <= ZOOM_ROWS:
            self._zoom(run, a, b, anchor_t, stop)
            return best_v, best_u, best_a

        # golden-section refinement inside [a, b]
        c = b - INVPHI * (b - a)
        d = a + INVPHI * (b - a)
        fc = run(c, allrows)
        fd = run(d, allrows)
        iters = 0
        while iters < MAX_ITER:
            active = (b - a) > np.maximum(stop, 8 * np.finfo(float).eps * np.maximum(np.abs(a), np.abs(b)))
            if not active.any():
                break
            iters += 1
            # keep [c, b] when d is better, or when both are -inf and the
            # anchor lies beyond d
            both_inf = ~np.isfinite(fc) & ~np.isfinite(fd)
            right = (fc < fd) | (both_inf & (anchor_t >= d))
            right &= active
            left = active & ~right
            na, nb = a.copy(), b.copy()
            na[right] = c[right]
            nb[left] = d[left]
            nc, nd = c.copy(), d.copy()
            nfc, nfd = fc.copy(), fd.copy()
            # right: old d becomes c; left: old c becomes d
            nc[right] = d[right]
            nfc[right] = fd[right]
            nd[right] = na[right] + INVPHI * (nb[right] - na[right])
            nd[left] = c[left]
            nfd[left] = fc[left]
            nc[left] = nb[left] - INVPHI * (nb[left] - na[left])
            newpt = np.where(right, nd, nc)
            idx = allrows[active]
            fnew = run(newpt[idx], idx)
            full = np.empty(B)
            full[idx] = fnew
            nfd = np.where(right, full, nfd)
            nfc = np.where(left, full, nfc)
            a, b, c, d, fc, fd = na, nb, nc, nd, nfc, nfd
        self.iterations = iters
        with np.errstate(invalid="ignore", divide="ignore"):
            slope = np.abs(fd - fc) / np.maximum(d - c, 1e-300)
            self.gap = np.where(np.isfinite(slope), slope * (b - a), np.nan)
        return best_v, best_u, best_a

    def _zoom(self, run, a: np.ndarray, b: np.ndarray, anchor_t: np.ndarray, stop: np.ndarray):
        """Shrink ``[a, b]`` onto the best of ``ZOOM_POINTS`` equispaced interior samples.

        For a concave function the maximizer lies between the neighbours of
        the best sample, so each pass divides the width by ``(K + 1) / 2``.
        Used for small batches, where one wide call beats many narrow ones.
        """
        K = ZOOM_POINTS
        frac = np.arange(1, K + 1) / (K + 1)
        gap = np.full(len(a), np.nan)
        a, b = a.copy(), b.copy()
        iters = 0
        while iters < MAX_ITER:
            width = b - a
            active = width > np.maximum(stop, 8 * np.finfo(float).eps * np.maximum(np.abs(a), np.abs(b)))
            if not active.any():
                break
            iters += 1
            idx = np.flatnonzero(active)
            n = len(idx)
            t = a[idx, None] + width[idx, None] * frac[None, :]
            v = run(t.reshape(-1), np.repeat(idx, K)).reshape(n, K)
            i = np.argmax(v, axis=1)
            r = np.arange(n)
            lost = ~np.isfinite(v[r, i])
            if lost.any():
                # nothing finite sampled: keep the cell holding the anchor
                near = np.rint((anchor_t[idx] - a[idx]) / width[idx] * (K + 1)) - 1
                i = np.where(lost, np.clip(near, 0, K - 1).astype(int), i)
            step = width[idx] / (K + 1)
            ti = t[r, i]
            with np.errstate(invalid="ignore"):
                left = np.where(i > 0, np.abs(v[r, i] - v[r, np.maximum(i - 1, 0)]), 0.0)
                right = np.where(i < K - 1, np.abs(v[r, i] - v[r, np.minimum(i + 1, K - 1)]), 0.0)
            gap[idx] = np.maximum(left, right)
            a[idx] = ti - step
            b[idx] = ti + step
        self.iterations = iters
        self.gap = np.where(np.isfinite(gap), gap, np.nan)


def make_objective(problem: OnePeriodProblem) -> WorstCaseObjective:
    Z = problem.geometry.coordinates() if problem.geometry.dim else np.zeros((len(problem.outcomes), 0))
    # the geometry's support points follow the outcome order of the problem
    return WorstCaseObjective(Z, problem.vertices, problem.next_value)


def inner_worst_case(problem: OnePeriodProblem, h: np.ndarray) -> tuple[float, int | None]:
    """Worst vertex expectation at position ``h``; ``(-inf, None)`` if ``h`` is infeasible."""
    h = np.asarray(h, dtype=float).reshape(-1)
    x = problem.x
    W = x + problem.outcomes @ h
    if np.any(W < -FEAS_TOL * max(1.0, abs(x))):
        return -math.inf, None
    obj = WorstCaseObjective(problem.outcomes, problem.vertices, problem.next_value)
    vals, arg = obj(np.array([x]), h[None, :])
    return float(vals[0]), int(arg[0])


def solve_batch(
    problem: OnePeriodProblem, xs: np.ndarray, *, tie_break: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Solve the node problem at every wealth in ``xs`` at once.

    Returns:
        ``(values, h (B, d), worst vertex (B,), info)``.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1)
    B = len(xs)
    geom = problem.geometry
    d = problem.outcomes.shape[1]
    if problem.alpha <= 0 or not geom.contains_origin:
        raise PreconditionError(f"node {geom.node!r}: no-arbitrage does not hold")
    obj = make_objective(problem)
    m = geom.dim
    vals = np.full(B, -np.inf)
    U = np.zeros((B, m))
    arg = np.zeros(B, dtype=int)
    info = {"iterations": 0, "gap": np.full(B, np.nan), "nonunique": np.zeros(B, bool)}
    neg = xs < 0
    trivial = (xs == 0) | (m == 0)
    # D_0 = {0} under no-arbitrage, and dim 0 leaves no choice
    idx = np.flatnonzero(trivial & ~neg)
    if idx.size:
        v0, a0 = obj(xs[idx], np.zeros((idx.size, m)))
        vals[idx], arg[idx] = v0, a0
        info["gap"][idx] = 0.0
    idx = np.flatnonzero(~trivial & ~neg)
    if idx.size:
        search = _NestedSearch(obj)
        v, u, a = search.solve(0, xs[idx], np.zeros((idx.size, 0)), anchor=np.zeros(idx.size))
        vals[idx], U[idx], arg[idx] = v, u, a
        info["iterations"] = search.iterations
        info["gap"][idx] = search.gap
        if tie_break:
            U[idx], info["nonunique"][idx] = _shrink_to_origin(obj, xs[idx], U[idx], v)
            vals[idx], arg[idx] = obj(xs[idx], U[idx])
    H = U @ geom.d_basis.T if m else np.zeros((B, d))
    return vals, H, arg, info


def _shrink_to_origin(obj, x, U, v, steps: int = 60):
    """Move each optimizer along the ray toward 0 while the value stays optimal."""
    tol = FLAT_TOL * (1.0 + np.abs(v))
    target = np.where(np.isfinite(v), v - tol, np.inf)
    lo = np.zeros(len(x))  # lo is not known to be optimal, hi is
    hi = np.ones(len(x))
    f0, _ = obj(x, np.zeros_like(U))
    ok0 = f0 >= target
    hi = np.where(ok0, 0.0, hi)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        f, _ = obj(x, U * mid[:, None])
        good = f >= target
        hi = np.where(good, mid, hi)
        lo = np.where(good, lo, mid)
    moved = hi < 1.0 - 1e-4
    return U * hi[:, None], moved


def solve_one_period(problem: OnePeriodProblem) -> SaddleSolution:
    """Maximize the worst-case expected continuation value at ``problem.x``."""
    vals, H, arg, info = solve_batch(problem, np.array([problem.x]))
    v = float(vals[0])
    if not math.isfinite(v):
        return SaddleSolution(
            v, np.zeros(problem.outcomes.shape[1]), None if problem.x < 0 else int(arg[0]),
            iterations=int(info["iterations"]), gap=math.nan, degenerate=True,
        )
    return SaddleSolution(
        value=v,
        h_opt=H[0],
        worst_vertex=int(arg[0]),
        iterations=int(info["iterations"]),
        gap=float(info["gap"][0]),
        nonunique=bool(info["nonunique"][0]),
    )


def rational_sup_check(
    problem: OnePeriodProblem,
    levels: Sequence[int] = tuple(range(1, 17)),
    *,
    max_points: int = 1 << 20,
    window: int = 64,
) -> list[tuple[int, float, bool]]:
    """Maxima of the objective over dyadic grids ``2^-k Z^d`` inside ``|h_i| <= x/alpha``.

    Small grids are scanned exhaustively. Larger ones are scanned on a window
    of ``window`` mesh cells around the solver optimum and around the previous
    level's best point, which keeps the sequence non-decreasing because the
    dyadic grids are nested.

    Returns:
        ``(k, value, exhaustive)`` for every requested level.
    """
    x = problem.x
    d = problem.outcomes.shape[1]
    if x < 0:
        return [(k, -math.inf, True) for k in levels]
    radius = x / problem.alpha
    obj = WorstCaseObjective(problem.outcomes, problem.vertices, problem.next_value)
    sol = solve_one_period(problem)
    center = sol.h_opt
    prev = np.zeros(d)
    out = []
    for k in levels:
        mesh = 2.0 ** -k
        n_half = math.floor(radius / mesh)
        total = (2 * n_half + 1) ** d
        if total <= max_points:
            axes = [np.arange(-n_half, n_half + 1) * mesh] * d
            exhaustive = True
            pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        else:
            exhaustive = False
            blocks = []
            for c in (center, prev):
                base = np.round(c / mesh)
                axes = [
                    np.clip(np.arange(b - window, b + window + 1), -n_half, n_half) * mesh
                    for b in base
                ]
                blocks.append(np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d))
            blocks.append(prev[None, :])
            pts = np.unique(np.concatenate(blocks), axis=0)
        best, best_h = -math.inf, prev
        for chunk in np.array_split(pts, max(1, len(pts) // 65536)):
            v, _ = obj(np.full(len(chunk), x), chunk)
            i = int(np.argmax(v))
            if v[i] > best:
                best, best_h = float(v[i]), chunk[i]
        prev = best_h
        out.append((k, best, exhaustive))
    return out


def projection_invariant(problem: OnePeriodProblem, h: np.ndarray) -> tuple[float, float]:
    """Objective at ``h`` and at its projection onto the span (for checks)."""
    return (
        inner_worst_case(problem, h)[0],
        inner_worst_case(problem, project_to_D(problem.geometry, h))[0],
    )
