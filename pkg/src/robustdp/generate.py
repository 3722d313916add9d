"""Instance generators: recombining-free binomial/trinomial trees and seeded random trees."""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np

from .market_model import MarketModel

BRANCH_LABELS = {2: ("u", "d"), 3: ("u", "m", "d")}


def _utility_doc(family: str, p: float | None) -> dict[str, Any]:
    if family == "power":
        return {"family": "power", "params": {"p": 0.5 if p is None else p}}
    if family == "piecewise_linear":
        return {
            "family": "piecewise_linear",
            "params": {"knots": [0.0, 0.5, 1.0, 2.0, 4.0], "values": [0.0, 0.8, 1.3, 1.8, 2.1]},
        }
    return {"family": "log"}


def lattice_model(
    periods: int,
    factors: Sequence[float],
    vertices: Sequence[Sequence[float]],
    *,
    s0: float = 1.0,
    utility: str = "log",
    power: float | None = None,
) -> MarketModel:
    """Single-asset tree where each step multiplies the price by one factor.

    Node ids spell the path (``"root"``, ``"u"``, ``"ud"``, ...); the same
    polytope is attached to every internal node.
    """
    labels = BRANCH_LABELS.get(len(factors)) or tuple(f"b{i}" for i in range(len(factors)))
    nodes = [{"id": "root", "parent": None, "depth": 0, "prices": [s0]}]
    priors: dict[str, list[list[float]]] = {}
    frontier = [("root", "", s0)]
    for t in range(periods):
        nxt = []
        for nid, path, s in frontier:
            priors[nid] = [list(map(float, v)) for v in vertices]
            for lab, f in zip(labels, factors):
                cid = path + lab
                nodes.append({"id": cid, "parent": nid, "depth": t + 1, "prices": [s * f]})
                nxt.append((cid, cid, s * f))
        frontier = nxt
    doc = {
        "horizon": periods,
        "asset_count": 1,
        "price_floor": 0.0,
        "nodes": nodes,
        "priors": priors,
        "utility": _utility_doc(utility, power),
    }
    return MarketModel.from_dict(doc)


def binomial_model(
    periods: int, up: float, down: float, p_lo: float, p_hi: float, **kw
) -> MarketModel:
    """Binomial tree with up-probability ranging over ``[p_lo, p_hi]``."""
    verts = [[p_lo, 1 - p_lo]]
    if p_hi != p_lo:
        verts.append([p_hi, 1 - p_hi])
    return lattice_model(periods, (up, down), verts, **kw)


def trinomial_model(
    periods: int, up: float, mid: float, down: float, p_lo: float, p_hi: float,
    q_mid: float = 0.2, **kw,
) -> MarketModel:
    """Trinomial tree; the up-probability ranges over ``[p_lo, p_hi]``, the middle one is fixed."""
    verts = [[p_lo, q_mid, 1 - p_lo - q_mid]]
    if p_hi != p_lo:
        verts.append([p_hi, q_mid, 1 - p_hi - q_mid])
    return lattice_model(periods, (up, mid, down), verts, **kw)


def random_model(
    seed: int,
    *,
    horizon: int | None = None,
    assets: int | None = None,
    utility: str | None = None,
    single_prior: bool = False,
    require_na: bool = True,
    max_tries: int = 200,
) -> MarketModel:
    """Seeded random desk-scale instance (``T <= 2``, ``d <= 2``, 2-4 children).

    Prices move by independent log-normal factors; a quarter of the moves
    per node are flattened or duplicated to produce degenerate supports.
    Polytopes have 1-3 vertices drawn from a Dirichlet law, sometimes with a
    zero entry. With ``require_na`` the draw is repeated until quasi-sure
    no-arbitrage holds.
    """
    from .arbitrage import check_na_global

    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        model = _draw(rng, horizon, assets, utility, single_prior, require_na)
        if not require_na or check_na_global(model, with_sna=False).na_qT:
            return model
    raise RuntimeError(f"seed {seed}: no arbitrage-free draw in {max_tries} tries")


def _node_moves(rng, J: int, d: int, s: np.ndarray, require_na: bool, tries: int = 100):
    """Price factors for ``J`` children; redrawn until the node is arbitrage-free."""
    from .arbitrage import _na_lp

    for _ in range(tries):
        moves = np.exp(rng.normal(0.0, 0.3, (J, d)))
        if rng.random() < 0.25:
            moves[int(rng.integers(J))] = 1.0  # a flat move
        if J > 2 and rng.random() < 0.15:
            moves[1] = moves[0]  # two children with equal prices
        if not require_na or _na_lp(s * (moves - 1.0))[0] < 0.5:
            break
    return moves


def _draw(rng, horizon, assets, utility, single_prior, require_na=True) -> MarketModel:
    T = int(horizon or rng.integers(1, 3))
    d = int(assets or rng.integers(1, 3))
    fam = utility or str(rng.choice(["log", "power", "piecewise_linear"]))
    nodes = [{"id": "root", "parent": None, "depth": 0, "prices": list(rng.uniform(0.5, 2.0, d))}]
    priors: dict[str, list[list[float]]] = {}
    frontier = [("root", np.asarray(nodes[0]["prices"]))]
    for t in range(T):
        nxt = []
        for nid, s in frontier:
            J = int(rng.integers(2 if d == 1 else 3, 5))
            moves = _node_moves(rng, J, d, s, require_na)
            K = 1 if single_prior else int(rng.integers(1, 4))
            verts = rng.dirichlet(np.ones(J), size=K)
            if K > 1 and rng.random() < 0.2:
                verts[0, int(rng.integers(J))] = 0.0
            verts = np.round(verts / verts.sum(axis=1, keepdims=True), 12)
            verts[:, -1] = 1.0 - verts[:, :-1].sum(axis=1)
            priors[nid] = verts.tolist()
            for j in range(J):
                cid = f"{nid}.{j}" if nid != "root" else f"n{j}"
                price = s * moves[j]
                nodes.append({"id": cid, "parent": nid, "depth": t + 1, "prices": price.tolist()})
                nxt.append((cid, price))
        frontier = nxt
    doc: dict[str, Any] = {
        "horizon": T,
        "asset_count": d,
        "price_floor": 0.0,
        "nodes": nodes,
        "priors": priors,
        "utility": _utility_doc(fam, float(rng.choice([0.3, 0.5, 0.7]))),
    }
    if rng.random() < 0.3:
        doc["utility"]["per_leaf"] = {
            n["id"]: {"weight": float(rng.uniform(0.5, 2.0)), "shift": float(rng.uniform(0.0, 0.5))}
            for n in nodes
            if n["depth"] == T
        }
    return MarketModel.from_dict(doc)
