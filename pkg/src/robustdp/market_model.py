"""Finite scenario trees with per-node prior polytopes and leaf utilities.

A model is a rooted tree of depth ``T``. Every node carries a price vector in
``R^d``; every internal node carries a set of priors over its children, given
by the vertices of a polytope of probability vectors. Terminal wealth is
scored by a concave, non-decreasing utility that may differ from leaf to leaf
through a positive weight and a non-negative shift.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .exceptions import ModelError

PROB_TOL = 1e-12
FAMILIES = ("log", "power", "piecewise_linear")


@dataclass(frozen=True)
class Node:
    """A node of the scenario tree.

    Attributes:
        id: Unique string identifier.
        parent: Identifier of the parent, ``None`` for the root.
        depth: Distance from the root.
        prices: Price vector of the risky assets at this node.
    """

    id: str
    parent: str | None
    depth: int
    prices: tuple[float, ...]


@dataclass(frozen=True)
class PriorPolytope:
    """Convex hull of finitely many probability vectors over a node's children."""

    vertices: tuple[tuple[float, ...], ...]

    @cached_property
    def array(self) -> np.ndarray:
        """Vertices as a ``(K, J)`` array with tiny negative entries clamped to 0."""
        arr = np.asarray(self.vertices, dtype=float)
        if arr.ndim != 2:
            arr = arr.reshape(len(self.vertices), -1)
        return np.where((arr < 0) & (arr >= -PROB_TOL), 0.0, arr)

    @property
    def size(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class RandomUtility:
    """Leaf utility ``U(leaf, x) = w(leaf) * base(x) + a(leaf)``.

    Attributes:
        family: ``"log"``, ``"power"`` or ``"piecewise_linear"``.
        params: Family parameters. ``power`` needs ``p`` in (0, 1);
            ``piecewise_linear`` needs ``knots`` (starting at 0, increasing)
            and ``values`` (non-decreasing, concave). Beyond the last knot the
            last slope is continued.
        per_leaf: Optional ``{leaf_id: {"weight": w, "shift": a}}`` overrides.
    """

    family: str
    params: Mapping[str, Any] = field(default_factory=dict)
    per_leaf: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def weight(self, leaf: str) -> float:
        return float(self.per_leaf.get(leaf, {}).get("weight", 1.0))

    def shift(self, leaf: str) -> float:
        return float(self.per_leaf.get(leaf, {}).get("shift", 0.0))

    def base(self, x: np.ndarray | float) -> np.ndarray:
        """Evaluate the base utility, returning ``-inf`` for negative wealth."""
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, -np.inf)
        ok = x >= 0
        xs = x[ok]
        if self.family == "log":
            with np.errstate(divide="ignore"):
                out[ok] = np.log(xs)
        elif self.family == "power":
            out[ok] = np.power(xs, float(self.params["p"]))
        elif self.family == "piecewise_linear":
            knots = np.asarray(self.params["knots"], dtype=float)
            vals = np.asarray(self.params["values"], dtype=float)
            inner = np.interp(xs, knots, vals)
            if len(knots) > 1:
                slope = (vals[-1] - vals[-2]) / (knots[-1] - knots[-2])
                beyond = xs > knots[-1]
                inner[beyond] = vals[-1] + slope * (xs[beyond] - knots[-1])
            out[ok] = inner
        else:
            raise ModelError(f"unknown utility family {self.family!r}")
        return out

    def evaluate(self, leaf: str, x: np.ndarray | float) -> np.ndarray:
        """Utility of ``leaf`` at wealth ``x`` (vectorized)."""
        return self.weight(leaf) * self.base(x) + self.shift(leaf)

    def negative_part(self, leaf: str, x: float) -> float:
        """``U^-(leaf, x) = max(-U(leaf, x), 0)``."""
        val = float(self.evaluate(leaf, x))
        return max(-val, 0.0)

    def leaf_function(self, leaf: str) -> Callable[[np.ndarray], np.ndarray]:
        """Closure evaluating this leaf's utility on arrays."""
        w, a = self.weight(leaf), self.shift(leaf)
        return lambda x: w * self.base(x) + a

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"family": self.family, "params": dict(self.params)}
        if self.per_leaf:
            out["per_leaf"] = {k: dict(v) for k, v in self.per_leaf.items()}
        return out


@dataclass(frozen=True, eq=False)
class MarketModel:
    """Scenario tree, price field, prior polytopes and terminal utility.

    The object may be constructed from inconsistent data; use
    :func:`validate_model` before handing it to the solvers.
    """

    horizon: int
    asset_count: int
    nodes: tuple[Node, ...]
    priors: Mapping[str, PriorPolytope]
    utility: RandomUtility
    price_floor: float = 0.0

    @cached_property
    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def children_map(self) -> dict[str, tuple[str, ...]]:
        # children appear in the order in which they are listed
        kids: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            if n.parent is not None and n.parent in kids:
                kids[n.parent].append(n.id)
        return {k: tuple(v) for k, v in kids.items()}

    @cached_property
    def root(self) -> str:
        roots = [n.id for n in self.nodes if n.parent is None]
        if len(roots) != 1:
            raise ModelError(f"expected exactly one root, found {len(roots)}")
        return roots[0]

    def node(self, node_id: str) -> Node:
        try:
            return self.node_map[node_id]
        except KeyError:
            raise ModelError(f"unknown node {node_id!r}") from None

    def children(self, node_id: str) -> tuple[str, ...]:
        return self.children_map[node_id]

    def is_leaf(self, node_id: str) -> bool:
        return not self.children_map[node_id]

    def price(self, node_id: str) -> np.ndarray:
        return np.asarray(self.node(node_id).prices, dtype=float)

    @cached_property
    def leaves(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes if not self.children_map[n.id])

    @cached_property
    def internal_nodes(self) -> tuple[str, ...]:
        """Internal nodes ordered by depth, then by listing order."""
        inner = [n for n in self.nodes if self.children_map[n.id]]
        inner.sort(key=lambda n: n.depth)
        return tuple(n.id for n in inner)

    def nodes_at_depth(self, depth: int) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes if n.depth == depth)

    def vertices(self, node_id: str) -> np.ndarray:
        """Prior vertices of an internal node as a ``(K, J)`` array."""
        return self.priors[node_id].array

    # serialization

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MarketModel":
        """Build a model from the JSON document layout."""
        try:
            nodes = tuple(
                Node(
                    id=str(n["id"]),
                    parent=None if n.get("parent") is None else str(n["parent"]),
                    depth=int(n["depth"]),
                    prices=tuple(float(p) for p in np.atleast_1d(n["prices"])),
                )
                for n in data["nodes"]
            )
            priors = {
                str(k): PriorPolytope(tuple(tuple(float(p) for p in v) for v in verts))
                for k, verts in data.get("priors", {}).items()
            }
            u = data["utility"]
            utility = RandomUtility(
                family=str(u["family"]),
                params=dict(u.get("params", {})),
                per_leaf={str(k): dict(v) for k, v in u.get("per_leaf", {}).items()},
            )
            return cls(
                horizon=int(data["horizon"]),
                asset_count=int(data["asset_count"]),
                nodes=nodes,
                priors=priors,
                utility=utility,
                price_floor=float(data.get("price_floor", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed model document: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "asset_count": self.asset_count,
            "price_floor": self.price_floor,
            "nodes": [
                {"id": n.id, "parent": n.parent, "depth": n.depth, "prices": list(n.prices)}
                for n in self.nodes
            ],
            "priors": {k: [list(v) for v in p.vertices] for k, p in self.priors.items()},
            "utility": self.utility.to_dict(),
        }

    @classmethod
    def load(cls, path: str | Path) -> "MarketModel":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def with_priors(self, updates: Mapping[str, Sequence[Sequence[float]]]) -> "MarketModel":
        """Copy of the model with some polytopes replaced."""
        priors = dict(self.priors)
        for k, verts in updates.items():
            priors[k] = PriorPolytope(tuple(tuple(float(p) for p in v) for v in verts))
        return MarketModel(
            self.horizon, self.asset_count, self.nodes, priors, self.utility, self.price_floor
        )


@dataclass(frozen=True)
class ValidationReport:
    """Invariant violations (fatal) and warnings (informational)."""

    violations: tuple[str, ...]
    warnings: tuple[str, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class NonPolarMask:
    """Reachability of each node under at least one prior selection.

    Attributes:
        nonpolar: Node id to flag.
        edge_max: ``(parent, child)`` to the largest vertex probability of
            that edge.
    """

    nonpolar: Mapping[str, bool]
    edge_max: Mapping[tuple[str, str], float]

    def __getitem__(self, node_id: str) -> bool:
        return self.nonpolar[node_id]

    def nonpolar_children(self, model: MarketModel, node_id: str) -> tuple[str, ...]:
        return tuple(c for c in model.children(node_id) if self.nonpolar[c])


def _validate_utility(model: MarketModel, out: list[str]) -> None:
    u = model.utility
    if u.family not in FAMILIES:
        out.append(f"utility: unknown family {u.family!r}")
        return
    if u.family == "power":
        p = u.params.get("p")
        if not isinstance(p, (int, float)) or not 0 < p < 1:
            out.append("utility: power exponent p must lie in (0, 1)")
    if u.family == "piecewise_linear":
        knots = np.asarray(u.params.get("knots", []), dtype=float)
        vals = np.asarray(u.params.get("values", []), dtype=float)
        if knots.ndim != 1 or len(knots) < 2 or knots.shape != vals.shape:
            out.append("utility: piecewise_linear needs matching knots/values (>= 2)")
            return
        if knots[0] != 0 or np.any(np.diff(knots) <= 0):
            out.append("utility: piecewise_linear knots must start at 0 and increase")
            return
        if not np.all(np.isfinite(vals)):
            out.append("utility: piecewise_linear values must be finite")
            return
        slopes = np.diff(vals) / np.diff(knots)
        if np.any(slopes < -1e-12):
            out.append("utility: piecewise_linear is not non-decreasing")
        if np.any(np.diff(slopes) > 1e-12 * (1 + np.abs(slopes[1:]))):
            out.append("utility: piecewise_linear is not concave")
    leaves = set(model.leaves) if _tree_ok(model) else set()
    for leaf, over in u.per_leaf.items():
        if leaves and leaf not in leaves:
            out.append(f"utility: per-leaf override for non-leaf {leaf!r}")
        w = over.get("weight", 1.0)
        a = over.get("shift", 0.0)
        if not (math.isfinite(w) and w > 0):
            out.append(f"leaf {leaf}: weight must be > 0")
        if not (math.isfinite(a) and a >= 0):
            out.append(f"leaf {leaf}: shift must be >= 0")


def _tree_ok(model: MarketModel) -> bool:
    try:
        model.root
    except ModelError:
        return False
    return len(model.node_map) == len(model.nodes)


def validate_model(model: MarketModel) -> ValidationReport:
    """Check every structural invariant and report all violations.

    Malformed trees are reported, never raised.
    """
    out: list[str] = []
    warn: list[str] = []
    if model.horizon < 1:
        out.append("horizon must be >= 1")
    if model.asset_count < 1:
        out.append("asset_count must be >= 1")
    if not (math.isfinite(model.price_floor) and model.price_floor >= 0):
        out.append("price_floor must be a finite number >= 0")

    ids = [n.id for n in model.nodes]
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            out.append(f"node {i}: duplicate identifier")
        seen.add(i)
    roots = [n for n in model.nodes if n.parent is None]
    if len(roots) != 1:
        out.append(f"tree: expected exactly one root, found {len(roots)}")
    for r in roots:
        if r.depth != 0:
            out.append(f"node {r.id}: root must have depth 0")

    by_id = model.node_map
    for n in model.nodes:
        if n.parent is not None:
            par = by_id.get(n.parent)
            if par is None:
                out.append(f"node {n.id}: orphan (parent {n.parent!r} missing)")
            elif n.depth != par.depth + 1:
                out.append(f"node {n.id}: depth gap (depth {n.depth}, parent depth {par.depth})")
        if len(n.prices) != model.asset_count:
            out.append(f"node {n.id}: expected {model.asset_count} prices, got {len(n.prices)}")
        for i, s in enumerate(n.prices):
            if not math.isfinite(s):
                out.append(f"node {n.id}: price {i} is not finite")
            elif s < -model.price_floor:
                out.append(f"node {n.id}: price below −s (S^{i} = {s} < {-model.price_floor})")

    # reachability from the root catches cycles and detached components
    if len(roots) == 1 and len(seen) == len(ids):
        reached = {roots[0].id}
        stack = [roots[0].id]
        while stack:
            cur = stack.pop()
            for c in model.children_map.get(cur, ()):
                if c not in reached:
                    reached.add(c)
                    stack.append(c)
        for i in ids:
            if i not in reached:
                out.append(f"node {i}: not connected to the root")

    kids = model.children_map
    for n in model.nodes:
        has_kids = bool(kids.get(n.id))
        if not has_kids and n.depth != model.horizon:
            out.append(f"node {n.id}: leaf at depth {n.depth} != horizon {model.horizon}")
        if has_kids and n.depth >= model.horizon:
            out.append(f"node {n.id}: node at depth {n.depth} has children")

    for n in model.nodes:
        k = kids.get(n.id, ())
        if not k:
            if n.id in model.priors:
                out.append(f"node {n.id}: prior attached to a leaf")
            continue
        poly = model.priors.get(n.id)
        if poly is None or not poly.vertices:
            out.append(f"node {n.id}: missing or empty prior polytope")
            continue
        rows = []
        for vi, v in enumerate(poly.vertices):
            if len(v) != len(k):
                out.append(
                    f"node {n.id}: vertex {vi} not a probability vector "
                    f"(length {len(v)} for {len(k)} children)"
                )
                continue
            arr = np.asarray(v, dtype=float)
            if not np.all(np.isfinite(arr)) or np.any(arr < -PROB_TOL) or abs(
                math.fsum(arr) - 1.0
            ) > PROB_TOL:
                out.append(
                    f"node {n.id}: vertex {vi} not a probability vector (sum {math.fsum(arr)!r})"
                )
                continue
            rows.append(tuple(v))
        if len(set(rows)) < len(rows):
            warn.append(f"node {n.id}: duplicate vertices")
    for k in model.priors:
        if k not in by_id:
            out.append(f"prior for unknown node {k!r}")

    _validate_utility(model, out)
    return ValidationReport(tuple(out), tuple(warn))


def nonpolar_mask(model: MarketModel) -> NonPolarMask:
    """Classify nodes as polar (null under every prior) or non-polar."""
    flags: dict[str, bool] = {model.root: True}
    edges: dict[tuple[str, str], float] = {}
    order = sorted(model.nodes, key=lambda n: n.depth)
    for n in order:
        kids = model.children(n.id)
        if not kids:
            continue
        P = model.vertices(n.id)
        emax = P.max(axis=0)
        for j, c in enumerate(kids):
            edges[(n.id, c)] = float(emax[j])
            flags[c] = bool(flags.get(n.id, False) and emax[j] > 0)
    return NonPolarMask(flags, edges)


def delta_s(model: MarketModel, node_id: str) -> list[tuple[str, np.ndarray]]:
    """Price increments ``S(child) - S(node)`` for every child of ``node_id``.

    Raises:
        ValueError: if the node is a leaf.
    """
    kids = model.children(node_id)
    if not kids:
        raise ValueError(f"node {node_id!r} is a leaf; no price increment is defined")
    s0 = model.price(node_id)
    return [(c, model.price(c) - s0) for c in kids]
