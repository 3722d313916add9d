"""Quasi-sure no-arbitrage analysis on a finite scenario tree.

At each non-polar internal node the quasi-sure conditional support of the
price increment is the set of increments towards non-polar children. The
no-arbitrage test is a bounded linear program; when it passes, a margin
``alpha`` is computed from the sets

    A_n = {unit h in D : P(h.dS <= -1/n) <= 1/n for every prior P},

as ``alpha = 1/n0`` with ``n0`` the first ``n`` for which ``A_n`` is empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np
from scipy.optimize import linprog

from .exceptions import LPSolverError, PreconditionError
from .market_model import MarketModel, NonPolarMask, delta_s, nonpolar_mask

RANK_TOL = 1e-9
CERT_TOL = 1e-9
ALPHA_EPS = 1e-12
ZERO_MOVE_TOL = 1e-12
DEFAULT_DIRECTIONS = 10_000


@dataclass(frozen=True, eq=False)
class NodeGeometry:
    """Support of the price increment at a node and the space it spans.

    Attributes:
        node: Node identifier.
        children: Children whose increments form the support.
        support_points: ``(J, d)`` array of increments.
        d_basis: ``(d, m)`` orthonormal basis of the linear span of the support.
        dim: ``m``.
        contains_origin: Whether 0 lies in the affine hull of the support.
        affine_basis: Orthonormal basis of the direction space of the affine hull.
        offset: Barycenter of the support (translation of the affine hull).
    """

    node: str
    children: tuple[str, ...]
    support_points: np.ndarray
    d_basis: np.ndarray
    dim: int
    contains_origin: bool
    affine_basis: np.ndarray
    offset: np.ndarray

    def coordinates(self) -> np.ndarray:
        """Support points expressed in the ``d_basis`` coordinates, ``(J, m)``."""
        return self.support_points @ self.d_basis


@dataclass(frozen=True)
class AlphaMargin:
    """Arbitrage margin at a node.

    Attributes:
        alpha: ``1/n0`` from the construction (sampled when ``exact`` is False).
        n0: The first empty index.
        alpha_cert: A value that is guaranteed not to exceed the true margin
            on the unit sphere of ``D``; equal to ``alpha`` when ``exact``.
        exact: The sphere was enumerated exactly (``dim <= 1``).
        certified: ``alpha_cert`` carries a proof (exact or covering argument).
        directions: Number of sampled directions (0 when exact).
    """

    alpha: float
    n0: int
    alpha_cert: float
    exact: bool
    certified: bool
    directions: int = 0


@dataclass(frozen=True, eq=False)
class NAVerdict:
    """Outcome of the node-wise no-arbitrage test."""

    node: str
    holds: bool
    certificate: np.ndarray | None = None
    margin: AlphaMargin | None = None
    lp_optimum: float = 0.0

    @property
    def alpha(self) -> float | None:
        return None if self.margin is None else self.margin.alpha


@dataclass(frozen=True, eq=False)
class NodeReport:
    verdict: NAVerdict
    geometry: NodeGeometry


@dataclass(frozen=True, eq=False)
class SNAReport:
    """Per-vertex no-arbitrage analysis.

    Attributes:
        sna: True iff single-prior no-arbitrage holds for every vertex at
            every non-polar internal node.
        margins: ``(node, vertex)`` to the vertex margin, ``None`` on failure.
        failures: ``(node, vertex)`` pairs that admit an arbitrage, with the
            certificate direction.
    """

    sna: bool
    margins: Mapping[tuple[str, int], AlphaMargin | None]
    failures: Mapping[tuple[str, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class NAReport:
    """Global no-arbitrage report."""

    nodes: Mapping[str, NodeReport]
    na_qT: bool
    mask: NonPolarMask
    sna: bool | None = None
    sna_report: SNAReport | None = None
    notes: tuple[str, ...] = field(default=())

    def alpha_cert(self, node: str) -> float:
        margin = self.nodes[node].verdict.margin
        if margin is None:
            raise PreconditionError(f"no-arbitrage fails at node {node!r}")
        return margin.alpha_cert

    def failing_nodes(self) -> list[str]:
        return [k for k, r in self.nodes.items() if not r.verdict.holds]

    def to_dict(self) -> dict:
        recs = []
        for node, rep in self.nodes.items():
            v, g = rep.verdict, rep.geometry
            rec = {
                "node": node,
                "holds": v.holds,
                "alpha": None if v.margin is None else v.margin.alpha,
                "alpha_cert": None if v.margin is None else v.margin.alpha_cert,
                "n0": None if v.margin is None else v.margin.n0,
                "alpha_exact": None if v.margin is None else v.margin.exact,
                "dim": g.dim,
                "support": g.support_points.tolist(),
                "children": list(g.children),
            }
            if v.certificate is not None:
                rec["certificate"] = v.certificate.tolist()
            recs.append(rec)
        out: dict = {"nodes": recs, "global": {"na_qT": self.na_qT, "sna": self.sna}}
        if self.sna_report is not None:
            out["vertex_margins"] = [
                {
                    "node": n,
                    "vertex": k,
                    "alpha": None if m is None else m.alpha,
                    "alpha_cert": None if m is None else m.alpha_cert,
                }
                for (n, k), m in self.sna_report.margins.items()
            ]
        if self.notes:
            out["notes"] = list(self.notes)
        return out


# geometry


def _orth_basis(points: np.ndarray) -> np.ndarray:
    d = points.shape[1]
    if points.shape[0] == 0:
        return np.zeros((d, 0))
    _, s, vt = np.linalg.svd(points, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((d, 0))
    rank = int(np.sum(s > RANK_TOL * s[0]))
    return vt[:rank].T.copy()


def geometry_from_points(node: str, children: tuple[str, ...], points: np.ndarray) -> NodeGeometry:
    """Build a :class:`NodeGeometry` from raw increments."""
    pts = np.asarray(points, dtype=float).reshape(len(children), -1)
    basis = _orth_basis(pts)
    if len(pts):
        offset = pts.mean(axis=0)
        aff = _orth_basis(pts - pts[0])
    else:
        offset = np.zeros(pts.shape[1])
        aff = np.zeros((pts.shape[1], 0))
    contains = aff.shape[1] == basis.shape[1]
    return NodeGeometry(
        node=node,
        children=tuple(children),
        support_points=pts,
        d_basis=basis,
        dim=basis.shape[1],
        contains_origin=contains,
        affine_basis=aff,
        offset=offset if not contains else np.zeros(pts.shape[1]),
    )


def _support(model: MarketModel, node: str, keep) -> tuple[tuple[str, ...], np.ndarray]:
    scale = max(1.0, float(np.max(np.abs(model.price(node)))))
    kids, pts = [], []
    for j, (c, dS) in enumerate(delta_s(model, node)):
        if keep(j, c):
            kids.append(c)
            # float noise in equal prices must not create a fake direction
            pts.append(np.where(np.abs(dS) <= ZERO_MOVE_TOL * scale, 0.0, dS))
    return tuple(kids), np.asarray(pts, dtype=float).reshape(len(kids), model.asset_count)


def node_geometry(model: MarketModel, mask: NonPolarMask, node: str) -> NodeGeometry:
    """Quasi-sure support of the increment at ``node`` and its span."""
    if model.is_leaf(node):
        raise PreconditionError(f"node {node!r} is a leaf")
    if not mask[node]:
        raise PreconditionError(f"node {node!r} is polar")
    kids, pts = _support(model, node, lambda j, c: mask[c])
    if not kids:
        raise PreconditionError(f"node {node!r} has no non-polar child")
    return geometry_from_points(node, kids, pts)


def project_to_D(geometry: NodeGeometry, h: np.ndarray) -> np.ndarray:
    """Orthogonal projection of ``h`` onto the span of the support."""
    B = geometry.d_basis
    h = np.asarray(h, dtype=float).reshape(-1)
    return B @ (B.T @ h)


# no-arbitrage LP


def _na_lp(Y: np.ndarray) -> tuple[float, np.ndarray]:
    """Solve ``max sum s`` s.t. ``h.y_j >= s_j``, ``0 <= s_j <= 1``."""
    J, d = Y.shape
    c = np.concatenate([np.zeros(d), -np.ones(J)])
    A = np.hstack([-Y, np.eye(J)])
    bounds = [(None, None)] * d + [(0.0, 1.0)] * J
    res = linprog(c, A_ub=A, b_ub=np.zeros(J), bounds=bounds, method="highs")
    if res.status != 0:
        raise LPSolverError(f"no-arbitrage LP failed: {res.message}")
    return float(-res.fun), np.asarray(res.x[:d])


def verify_certificate(h: np.ndarray, Y: np.ndarray, tol: float = CERT_TOL) -> bool:
    """Exact rational recheck of ``h.y_j >= -tol`` for all ``j`` and ``> tol`` for one."""
    hq = [Fraction(float(v)) for v in np.asarray(h).reshape(-1)]
    tq = Fraction(tol)
    dots = [sum((a * Fraction(float(b)) for a, b in zip(hq, y)), Fraction(0)) for y in Y]
    return all(v >= -tq for v in dots) and any(v > tq for v in dots)


def _na_from_points(node: str, geom: NodeGeometry) -> tuple[bool, np.ndarray | None, float]:
    Y = geom.support_points
    if geom.dim == 0:
        return True, None, 0.0
    opt, h = _na_lp(Y)
    if opt < 0.5:
        return True, None, opt
    # the LP optimum counts strictly profitable outcomes, so it is >= 1 here
    h = project_to_D(geom, h)
    nrm = np.linalg.norm(h)
    if nrm == 0:
        raise LPSolverError(f"node {node!r}: LP reported arbitrage with a null direction")
    h = h / nrm
    if not verify_certificate(h, Y):
        raise LPSolverError(f"node {node!r}: arbitrage certificate failed the exact recheck")
    return False, h, opt


def check_na_node(
    model: MarketModel,
    mask: NonPolarMask,
    node: str,
    *,
    directions: int = DEFAULT_DIRECTIONS,
    seed: int = 0,
) -> NAVerdict:
    """Node-wise quasi-sure no-arbitrage test, with margin when it holds."""
    geom = node_geometry(model, mask, node)
    holds, cert, opt = _na_from_points(node, geom)
    margin = None
    if holds:
        P = model.vertices(node)[:, [model.children(node).index(c) for c in geom.children]]
        margin = alpha_from_points(geom, P, directions=directions, seed=seed)
    return NAVerdict(node, holds, cert, margin, opt)


# margin


def _n_steps(a: np.ndarray) -> np.ndarray:
    """Smallest ``n >= 1`` with ``a <= -1/n + eps``; ``inf`` when none exists."""
    gap = ALPHA_EPS - a
    with np.errstate(divide="ignore", invalid="ignore"):
        n = np.ceil(1.0 / gap)
    n = np.where(gap >= 1.0, 1.0, n)
    return np.where(gap > 0, n, np.inf)


def first_failure(A: np.ndarray, P: np.ndarray) -> np.ndarray:
    """For each direction, the first ``n`` at which it leaves ``A_n``.

    Args:
        A: ``(N, J)`` values ``h.y_j`` for ``N`` unit directions.
        P: ``(K, J)`` vertex probabilities.

    Returns:
        ``(N,)`` float array; ``inf`` if the direction never leaves.
    """
    N, J = A.shape
    steps = _n_steps(A)
    order = np.argsort(steps, axis=1, kind="stable")
    s_sorted = np.take_along_axis(steps, order, axis=1)
    # cumulative mass charged after each breakpoint, maximized over vertices
    mass = np.cumsum(P[:, order].transpose(1, 0, 2), axis=2)  # (N, K, J)
    G = mass.max(axis=1)
    nxt = np.concatenate([s_sorted[:, 1:], np.full((N, 1), np.inf)], axis=1)
    with np.errstate(divide="ignore"):
        cand = np.maximum(s_sorted, np.floor(1.0 / (G + ALPHA_EPS)) + 1.0)
    valid = (G > 0) & np.isfinite(s_sorted) & (cand < nxt)
    cand = np.where(valid, cand, np.inf)
    return cand.min(axis=1)


def _sphere(m: int, count: int, seed: int) -> np.ndarray:
    if m == 2:
        th = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    if m == 3:
        i = np.arange(count) + 0.5
        phi = np.arccos(1 - 2 * i / count)
        th = np.pi * (1 + 5**0.5) * i
        return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    g = np.random.default_rng(seed).standard_normal((count, m))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _covering_alpha(A: np.ndarray, P: np.ndarray, delta: float, radius: float) -> float:
    """Certified margin from a direction net of covering radius ``delta``.

    If ``|h - h_k| <= delta`` then ``h.y <= h_k.y + delta*R``; hence a level
    ``a`` with ``max_P P(h_k.Y <= -a) > a - delta*R`` for every sample ``k``
    certifies ``a - delta*R`` on the whole sphere.
    """
    shift = delta * radius
    levels = np.unique(-A[A < 0])
    if levels.size == 0:
        return 0.0

    def gmin(a: float) -> float:
        hit = A <= -a
        return float((hit[:, None, :] * P[None, :, :]).sum(axis=2).max(axis=1).min())

    # g is non-increasing in the level and a - shift increases, so bisect
    # for the last level where g still dominates
    lo, hi = -1, levels.size
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if gmin(levels[mid]) >= levels[mid] - shift:
            lo = mid
        else:
            hi = mid
    best = 0.0
    if lo >= 0:
        best = levels[lo] - shift
    if hi < levels.size:
        best = max(best, min(levels[hi] - shift, gmin(levels[hi])))
    # strictness: back off by a relative hair
    return best * (1 - 1e-9)


def alpha_from_points(
    geom: NodeGeometry,
    P: np.ndarray,
    *,
    directions: int = DEFAULT_DIRECTIONS,
    seed: int = 0,
) -> AlphaMargin:
    """Margin for support ``geom`` under vertex matrix ``P`` (``(K, J)``)."""
    m = geom.dim
    if m == 0:
        return AlphaMargin(1.0, 1, 1.0, exact=True, certified=True)
    Z = geom.coordinates()
    if m == 1:
        A = np.stack([Z[:, 0], -Z[:, 0]])
        n0 = float(first_failure(A, P).max())
        if not math.isfinite(n0):
            raise PreconditionError(f"node {geom.node!r}: no finite margin (arbitrage)")
        return AlphaMargin(1.0 / n0, int(n0), 1.0 / n0, exact=True, certified=True)
    H = _sphere(m, directions, seed)
    A = H @ Z.T
    n0 = float(first_failure(A, P).max())
    if not math.isfinite(n0):
        raise PreconditionError(f"node {geom.node!r}: no finite margin (arbitrage)")
    alpha = 1.0 / n0
    cert = 1.0 / (n0 + 1.0)
    certified = False
    if m == 2:
        delta = 2 * math.sin(math.pi / (2 * directions))
        radius = float(np.max(np.linalg.norm(Z, axis=1)))
        cover = _covering_alpha(A, P, delta, radius)
        if cover > 0:
            cert = min(cert, cover)
            certified = True
    return AlphaMargin(alpha, int(n0), cert, exact=False, certified=certified, directions=directions)


def compute_alpha(
    model: MarketModel,
    mask: NonPolarMask,
    node: str,
    *,
    directions: int = DEFAULT_DIRECTIONS,
    seed: int = 0,
) -> AlphaMargin:
    """Margin ``alpha = 1/n0`` at a node where no-arbitrage holds.

    Raises:
        PreconditionError: if no-arbitrage fails at the node.
    """
    geom = node_geometry(model, mask, node)
    holds, _, _ = _na_from_points(node, geom)
    if not holds:
        raise PreconditionError(f"no-arbitrage fails at node {node!r}")
    P = model.vertices(node)[:, [model.children(node).index(c) for c in geom.children]]
    return alpha_from_points(geom, P, directions=directions, seed=seed)


# global reports


def check_sna(
    model: MarketModel,
    mask: NonPolarMask | None = None,
    *,
    directions: int = DEFAULT_DIRECTIONS,
    seed: int = 0,
) -> SNAReport:
    """Single-prior no-arbitrage for every vertex at every non-polar node.

    The support under a vertex is the set of children it charges.
    """
    mask = nonpolar_mask(model) if mask is None else mask
    margins: dict[tuple[str, int], AlphaMargin | None] = {}
    failures: dict[tuple[str, int], np.ndarray] = {}
    for node in model.internal_nodes:
        if not mask[node]:
            continue
        P = model.vertices(node)
        for k in range(P.shape[0]):
            row = P[k]
            kids, pts = _support(model, node, lambda j, c, row=row: row[j] > 0)
            geom = geometry_from_points(node, kids, pts)
            holds, cert, _ = _na_from_points(node, geom)
            if holds:
                sub = row[[model.children(node).index(c) for c in kids]][None, :]
                margins[(node, k)] = alpha_from_points(geom, sub, directions=directions, seed=seed)
            else:
                margins[(node, k)] = None
                failures[(node, k)] = cert
    return SNAReport(not failures, margins, failures)


def check_na_global(
    model: MarketModel,
    *,
    with_sna: bool = True,
    directions: int = DEFAULT_DIRECTIONS,
    seed: int = 0,
) -> NAReport:
    """No-arbitrage verdicts for every non-polar internal node."""
    mask = nonpolar_mask(model)
    reports: dict[str, NodeReport] = {}
    for node in model.internal_nodes:
        if not mask[node]:
            continue
        geom = node_geometry(model, mask, node)
        verdict = check_na_node(model, mask, node, directions=directions, seed=seed)
        reports[node] = NodeReport(verdict, geom)
    na = all(r.verdict.holds for r in reports.values())
    notes = []
    if any(r.verdict.margin is not None and not r.verdict.margin.exact for r in reports.values()):
        notes.append(
            "alpha on dim >= 2 nodes is sampled; alpha_cert is the value used for search boxes"
        )
    sna_rep = check_sna(model, mask, directions=directions, seed=seed) if with_sna else None
    return NAReport(
        nodes=reports,
        na_qT=na,
        mask=mask,
        sna=None if sna_rep is None else sna_rep.sna,
        sna_report=sna_rep,
        notes=tuple(notes),
    )
