"""Brute-force reference computations for the robust problem.

Nothing here uses value tables. A strategy profile fixes a position at every
internal node; its worst-case expected utility is computed exactly by
walking the tree forward for wealth and backward for the smallest vertex
expectation at each node. For a fixed strategy the expected utility is
linear in each node's kernel, so the node-wise vertex minimum is the
infimum over all product priors. The search over profiles is a plain grid
search inside the boxes ``|u| <= X_max / alpha`` per node.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .arbitrage import NAReport, check_na_global
from .exceptions import OracleRefusal, PreconditionError
from .market_model import MarketModel, delta_s, nonpolar_mask

WEALTH_FLOOR = -1e-10
DEFAULT_MAX_EVALS = 10**7
CHUNK = 1 << 15

LeafValue = Callable[[str, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class BruteForceResult:
    """Best profile found by :func:`brute_force_value`.

    Attributes:
        value: Worst-case value of ``profile`` (a lower bound on the optimum).
        profile: Node id to position in ``R^d``.
        evaluations: Number of profiles scored.
        method: ``"grid"`` or ``"coordinate"``.
    """

    value: float
    profile: Mapping[str, np.ndarray]
    evaluations: int
    method: str


def _leaf_fn(model: MarketModel, leaf_value: LeafValue | None) -> LeafValue:
    if leaf_value is not None:
        return leaf_value
    return lambda leaf, w: model.utility.evaluate(leaf, w)


def fixed_strategy_worst_case_batch(
    model: MarketModel,
    profiles: Mapping[str, np.ndarray],
    x0: float,
    *,
    leaf_value: LeafValue | None = None,
    mask=None,
    relative: bool = False,
) -> np.ndarray:
    """Worst-case expected utility of ``M`` profiles at once.

    Args:
        profiles: Node id to ``(M, d)`` positions; missing nodes hold nothing.
        x0: Initial wealth.
        leaf_value: Optional replacement of the leaf utility.
        relative: Positions are per unit of the wealth reached at the node.

    Returns:
        ``(M,)`` array of values (``-inf`` where wealth goes negative).
    """
    mask = nonpolar_mask(model) if mask is None else mask
    util = _leaf_fn(model, leaf_value)
    M = next((np.asarray(p).shape[0] for p in profiles.values()), 1)
    wealth = {model.root: np.full(M, float(x0))}
    for node in model.internal_nodes:
        if not mask[node]:
            continue
        h = np.asarray(profiles.get(node, np.zeros((M, model.asset_count))), dtype=float)
        h = h.reshape(M, model.asset_count)
        if relative:
            h = h * wealth[node][:, None]
        for c, dS in delta_s(model, node):
            if mask[c]:
                wealth[c] = wealth[node] + h @ dS
    value: dict[str, np.ndarray] = {}
    for node in sorted(wealth, key=lambda n: -model.node(n).depth):
        W = wealth[node]
        if model.is_leaf(node):
            out = np.full(M, -np.inf)
            ok = W >= WEALTH_FLOOR * max(1.0, abs(x0))
            out[ok] = util(node, np.maximum(W[ok], 0.0))
            value[node] = out
            continue
        kids = model.children(node)
        P = model.vertices(node)
        best = np.full(M, np.inf)
        for k in range(P.shape[0]):
            acc = np.zeros(M)
            for j, c in enumerate(kids):
                if P[k, j] > 0:
                    acc = acc + P[k, j] * value[c]
            best = np.minimum(best, acc)
        value[node] = best
    return value[model.root]


def fixed_strategy_worst_case(
    model: MarketModel,
    profile: Mapping[str, np.ndarray],
    x0: float,
    *,
    leaf_value: LeafValue | None = None,
) -> float:
    """Infimum over all priors of the expected utility of one strategy."""
    batch = {k: np.asarray(v, dtype=float).reshape(1, -1) for k, v in profile.items()}
    return float(fixed_strategy_worst_case_batch(model, batch, x0, leaf_value=leaf_value)[0])


def path_measure_expectation(
    model: MarketModel,
    profile: Mapping[str, np.ndarray],
    x0: float,
    kernels: Mapping[str, np.ndarray],
) -> float:
    """Expected utility under the product measure of the given kernels.

    ``kernels`` maps every internal node to a probability vector over its
    children (any point of its polytope, not only a vertex).
    """
    total = 0.0
    stack = [(model.root, float(x0), 1.0)]
    while stack:
        node, W, prob = stack.pop()
        if prob == 0:
            continue
        if model.is_leaf(node):
            u = -math.inf if W < WEALTH_FLOOR * max(1.0, abs(x0)) else float(
                model.utility.evaluate(node, max(W, 0.0))
            )
            total += prob * u
            continue
        h = np.asarray(profile.get(node, np.zeros(model.asset_count)), dtype=float)
        q = np.asarray(kernels[node], dtype=float)
        for (c, dS), p in zip(delta_s(model, node), q):
            stack.append((c, W + float(h @ dS), prob * p))
    return total


def absolute_profile(
    model: MarketModel, relative: Mapping[str, np.ndarray], x0: float, mask=None
) -> dict[str, np.ndarray]:
    """Turn per-unit-wealth positions into positions along the realized path."""
    mask = nonpolar_mask(model) if mask is None else mask
    wealth = {model.root: float(x0)}
    out = {}
    for node in model.internal_nodes:
        if not mask[node] or node not in wealth:
            continue
        h = np.asarray(relative.get(node, np.zeros(model.asset_count)), dtype=float)
        out[node] = h * wealth[node]
        for c, dS in delta_s(model, node):
            if mask[c]:
                wealth[c] = wealth[node] + float(out[node] @ dS)
    return out


# search


def _boxes(model: MarketModel, report: NAReport, x0: float, relative: bool = False):
    """Decision nodes, their bases and box radii in span coordinates."""
    mask = report.mask
    xmax = {model.root: max(x0, 1e-12)}
    out = []
    for node in model.internal_nodes:
        if not mask[node]:
            continue
        rep = report.nodes[node]
        geom = rep.geometry
        alpha = rep.verdict.margin.alpha_cert
        X = xmax[node]
        dmax = float(np.max(np.linalg.norm(geom.support_points, axis=1))) if geom.dim else 0.0
        for c in model.children(node):
            xmax[c] = X * (1.0 + dmax / alpha)
        if geom.dim:
            out.append((node, geom.d_basis, (1.0 if relative else X) / alpha))
    return out


class _Scorer:
    def __init__(self, model, report, x0, nodes, leaf_value, max_evals, relative=False):
        self.model, self.x0, self.nodes = model, x0, nodes
        self.relative = relative
        self.mask = report.mask
        self.leaf_value = leaf_value
        self.max_evals = max_evals
        self.count = 0

    def __call__(self, U: list[np.ndarray]) -> np.ndarray:
        """Score ``M`` profiles given per-node span coordinates ``(M, m_i)``."""
        M = U[0].shape[0] if U else 1
        if self.count + M > self.max_evals:
            raise OracleRefusal(
                f"evaluation budget of {self.max_evals} exceeded ({self.count + M} requested)"
            )
        self.count += M
        prof = {n: u @ B.T for (n, B, _), u in zip(self.nodes, U)}
        return fixed_strategy_worst_case_batch(
            self.model, prof, self.x0, leaf_value=self.leaf_value, mask=self.mask,
            relative=self.relative,
        )


def _axes(center: np.ndarray, half: np.ndarray, p: int) -> list[np.ndarray]:
    return [c + h * np.linspace(-1.0, 1.0, p) for c, h in zip(center, half)]


def _grid_rounds(score, dims, center, half, radius, p, rounds, rel_stop):
    """Full product grid around ``center``; shrink onto the best point."""
    best_v, best_x = -math.inf, center.copy()
    total = sum(dims)
    for _ in range(rounds):
        axes = _axes(center, half, p)
        axes = [np.clip(a, -r, r) for a, r in zip(axes, radius)]
        for chunk in _product_chunks(axes):
            U = _split(chunk, dims)
            v = score(U)
            i = int(np.argmax(v))
            if v[i] > best_v:
                best_v, best_x = float(v[i]), chunk[i].copy()
        center = best_x
        half = half * 2.0 / (p - 1)
        if np.all(half <= rel_stop * np.maximum(radius, 1e-300)):
            break
    return best_v, best_x, total


def _product_chunks(axes: list[np.ndarray]):
    sizes = [len(a) for a in axes]
    n = int(np.prod(sizes))
    for start in range(0, n, CHUNK):
        idx = np.arange(start, min(n, start + CHUNK))
        cols = np.unravel_index(idx, sizes)
        yield np.stack([a[c] for a, c in zip(axes, cols)], axis=1)


def _split(flat: np.ndarray, dims: list[int]) -> list[np.ndarray]:
    out, s = [], 0
    for m in dims:
        out.append(flat[:, s:s + m])
        s += m
    return out


def brute_force_value(
    model: MarketModel,
    x0: float,
    *,
    grid_step: float | None = None,
    points: int | None = None,
    max_evals: int = DEFAULT_MAX_EVALS,
    rounds: int = 30,
    restarts: int = 5,
    seed: int = 0,
    leaf_value: LeafValue | None = None,
    na_report: NAReport | None = None,
) -> BruteForceResult:
    """Best worst-case value over a grid of strategy profiles.

    With at most three decision nodes the full product grid is scanned and
    then re-centred on the best point with a finer mesh. With more nodes a
    cyclic coordinate search over nodes runs from ``restarts`` starts (the
    zero strategy first, then seeded random ones); there positions are
    searched per unit of the wealth reached at each node, inside
    ``|u| <= 1/alpha``, and converted back to absolute positions.

    Raises:
        PreconditionError: if no-arbitrage fails.
        OracleRefusal: if the evaluation budget would be exceeded.
    """
    report = check_na_global(model, with_sna=False) if na_report is None else na_report
    if not report.na_qT:
        raise PreconditionError("no-arbitrage fails; the robust problem is unbounded")
    nodes = _boxes(model, report, x0)
    relative = len(nodes) > 3
    if relative:
        # per-unit-wealth positions decouple the nodes' feasibility constraints
        nodes = _boxes(model, report, x0, relative=True)
    score = _Scorer(model, report, x0, nodes, leaf_value, max_evals, relative)
    if not nodes:
        v = fixed_strategy_worst_case_batch(
            model, {}, x0, leaf_value=leaf_value, mask=report.mask
        )[0]
        score.count += 1
        return BruteForceResult(float(v), {}, score.count, "grid")
    dims = [B.shape[1] for _, B, _ in nodes]
    radius = np.concatenate([np.full(m, R) for (_, _, R), m in zip(nodes, dims)])
    D = int(sum(dims))

    def to_profile(flat: np.ndarray) -> dict[str, np.ndarray]:
        prof = {n: (u @ B.T)[0] for (n, B, _), u in zip(nodes, _split(flat[None, :], dims))}
        return absolute_profile(model, prof, x0, report.mask) if relative else prof

    def odd(n: float) -> int:
        n = max(3, int(n))
        return n if n % 2 else n - 1

    if len(nodes) <= 3:
        if grid_step is not None:
            p0 = odd(2 * math.floor(float(radius.max()) / grid_step) + 1)
        elif points is not None:
            p0 = odd(points)
        else:
            p0 = odd(min(2e5, max_evals / (rounds + 1)) ** (1.0 / D))
        if p0**D > max_evals:
            raise OracleRefusal(f"grid of {p0}^{D} profiles exceeds the budget of {max_evals}")
        v, x, _ = _grid_rounds(score, dims, np.zeros(D), radius.copy(), radius, p0, 1, 0.0)
        p = odd(min(p0, max(5, int(min(2e5, max_evals / (rounds + 1)) ** (1.0 / D)))))
        half = radius * 2.0 / (p0 - 1)
        v2, x2, _ = _grid_rounds(score, dims, x, half, radius, p, rounds, 1e-10)
        if v2 > v:
            v, x = v2, x2
        return BruteForceResult(v, to_profile(x), score.count, "grid")

    rng = np.random.default_rng(seed)
    offsets = np.cumsum([0] + dims)
    p_node = [odd(points or (65 if m == 1 else 17)) for m in dims]
    best_v, best_x = -math.inf, np.zeros(D)
    for r in range(restarts):
        x = np.zeros(D)
        if r:
            x = rng.uniform(-1, 1, D) * radius * 0.25
            for _ in range(40):
                if np.isfinite(score(_split(x[None, :], dims))[0]):
                    break
                x *= 0.5
        cur = float(score(_split(x[None, :], dims))[0])
        for _sweep in range(50):
            before = cur
            for i, m in enumerate(dims):
                sl = slice(offsets[i], offsets[i + 1])
                center = x[sl].copy()
                half = radius[sl].copy()
                pts_center = center
                for rd in range(rounds):
                    axes = [np.clip(a, -R, R) for a, R in zip(_axes(pts_center, half, p_node[i]), radius[sl])]
                    for chunk in _product_chunks(axes):
                        full = np.repeat(x[None, :], len(chunk), axis=0)
                        full[:, sl] = chunk
                        v = score(_split(full, dims))
                        j = int(np.argmax(v))
                        if v[j] > cur:
                            cur, x = float(v[j]), full[j].copy()
                    pts_center = x[sl]
                    half = half * 2.0 / (p_node[i] - 1)
                    if np.all(half <= 1e-10 * radius[sl]):
                        break
            if cur <= before + 1e-14 * (1 + abs(before)):
                break
        if cur > best_v:
            best_v, best_x = cur, x
    best_v, best_x = _polish(score, dims, best_x, best_v, radius, rng)
    return BruteForceResult(best_v, to_profile(best_x), score.count, "coordinate")


def _polish(score, dims, x, cur, radius, rng, directions=256, max_rounds=400):
    """Joint random-direction search; escapes kinks where coordinate moves stall."""
    steps = np.array([1.0, -1.0, 0.5, -0.5, 0.25, -0.25])
    step = 0.05
    for _ in range(max_rounds):
        if step < 1e-9:
            break
        dirs = rng.normal(size=(directions, len(x)))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cand = x[None, None, :] + step * steps[None, :, None] * dirs[:, None, :] * radius
        cand = np.clip(cand.reshape(-1, len(x)), -radius, radius)
        v = score(_split(cand, dims))
        i = int(np.argmax(v))
        if v[i] > cur:
            cur, x = float(v[i]), cand[i].copy()
            step *= 1.5
        else:
            step *= 0.5
    return cur, x


def estimate_m_x(
    model: MarketModel,
    x: float = 1.0,
    *,
    max_selections: int = 16,
    seed: int = 0,
    max_evals: int = 200_000,
) -> float:
    """Largest single-prior expected positive utility from wealth ``x``.

    Every vertex selection (one vertex per node) is a single prior. Under it
    only the charged children constrain wealth; if that prior admits an
    arbitrage the supremum is infinite. Otherwise the supremum of
    ``E[U^+]`` is estimated by :func:`brute_force_value`. At most
    ``max_selections`` selections are examined (sampled with ``seed`` when
    there are more).
    """
    mask = nonpolar_mask(model)
    inner = [n for n in model.internal_nodes if mask[n]]
    sizes = [model.priors[n].size for n in inner]
    total = int(np.prod(sizes)) if sizes else 1
    if total <= max_selections:
        picks = list(itertools.product(*[range(s) for s in sizes]))
    else:
        rng = np.random.default_rng(seed)
        picks = [tuple(int(rng.integers(s)) for s in sizes) for _ in range(max_selections)]

    def pos_part(leaf: str, w: np.ndarray) -> np.ndarray:
        return np.maximum(model.utility.evaluate(leaf, w), 0.0)

    best = 0.0
    for pick in picks:
        sub = model.with_priors({n: [model.priors[n].vertices[k]] for n, k in zip(inner, pick)})
        rep = check_na_global(sub, with_sna=False)
        if not rep.na_qT:
            return math.inf
        res = brute_force_value(sub, x, leaf_value=pos_part, na_report=rep, max_evals=max_evals, rounds=10)
        best = max(best, res.value)
    return best
