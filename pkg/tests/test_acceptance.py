"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run directly with ``python3 tests/test_acceptance.py`` or through pytest; the
verdict lines are collected in the terminal summary either way.
"""

from __future__ import annotations

import json
import math
import sys
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.optimize import linprog

import _instances as inst
from robustdp.arbitrage import check_na_global
from robustdp.cli import run
from robustdp.dp_engine import (
    _continuations,
    check_elasticity,
    compute_J,
    node_problem,
    robust_wealth_floor,
)
from robustdp.generate import binomial_model, random_model
from robustdp.market_model import MarketModel
from robustdp.oracle import brute_force_value, fixed_strategy_worst_case
from robustdp.saddle import rational_sup_check, solve_one_period


def _verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} ({detail})"
    inst.ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def _random_solved():
    return [inst.solved_random(s) for s in inst.RANDOM_SEEDS]


def _all_solved():
    named = [inst.solved_named(n) for n in ("bin1", "bin2", "flat")]
    return named + _random_solved()


def _root_problem(model: MarketModel):
    rep = check_na_global(model, with_sna=False)
    return node_problem(model, rep, model.root, 1.0, _continuations(model, model.root, {}))


# independent references


def _increments(model: MarketModel, node: str) -> list[tuple[str, list[Fraction]]]:
    p = [Fraction(v) for v in model.node(node).prices]
    return [
        (c, [Fraction(v) - a for v, a in zip(model.node(c).prices, p)])
        for c in model.children(node)
    ]


def _single_measure_na(model: MarketModel, tol: float = 1e-9) -> bool:
    """Classical check: a martingale measure equivalent to P exists at every reachable node."""
    P = {n: model.vertices(n)[0] for n in model.internal_nodes}
    stack = [model.root]
    while stack:
        node = stack.pop()
        kids = model.children(node)
        supp = [j for j, p in enumerate(P[node]) if p > 0]
        Y = np.array([[float(v) for v in _increments(model, node)[j][1]] for j in supp])
        J = len(supp)
        # max t s.t. q >= t, sum q = 1, Y^T q = 0
        c = np.zeros(J + 1)
        c[-1] = -1.0
        A_ub = np.hstack([-np.eye(J), np.ones((J, 1))])
        A_eq = np.vstack([np.append(np.ones(J), 0.0), np.hstack([Y.T, np.zeros((Y.shape[1], 1))])])
        b_eq = np.append(1.0, np.zeros(Y.shape[1]))
        res = linprog(c, A_ub=A_ub, b_ub=np.zeros(J), A_eq=A_eq, b_eq=b_eq,
                      bounds=[(0, None)] * J + [(None, 1.0)], method="highs")
        if res.status != 0 or -res.fun <= tol:
            return False
        stack.extend(kids[j] for j in supp if not model.is_leaf(kids[j]))
    return True


def _exact_n0(z: np.ndarray, P: np.ndarray, n_max: int = 10**6) -> int:
    """Smallest n with no unit direction s in {+1, -1} satisfying P(s z <= -1/n) <= 1/n for all P."""
    zf = [Fraction(float(v)) for v in z]
    Pf = [[Fraction(float(p)) for p in row] for row in P]
    for n in range(1, n_max):
        bound = Fraction(1, n)
        nonempty = False
        for s in (1, -1):
            mass = max(sum(p for p, v in zip(row, zf) if s * v <= -bound) for row in Pf)
            if mass <= bound:
                nonempty = True
                break
        if not nonempty:
            return n
    raise AssertionError("n0 not found")


# criteria


def test_criterion_01_one_period_equivalence(tmp_path, capsys):
    path = tmp_path / "bin1.json"
    inst.bin1().dump(path)
    t0 = time.perf_counter()
    code = run(["solve", str(path), "--json"])
    elapsed = time.perf_counter() - t0
    doc = json.loads(capsys.readouterr().out)
    oracle = brute_force_value(inst.bin1(), 1.0, grid_step=1e-5).value
    err = abs(doc["value"] - oracle)
    herr = abs(doc["h_root"][0] - 0.2)
    ok = code == 0 and err <= 1e-6 and herr <= 1e-4 and elapsed < 1.0
    _verdict(1, "one-period equivalence on BIN1", ok,
             f"|U-oracle|={err:.2e}, |h-0.2|={herr:.2e}, {elapsed:.2f}s")


def test_criterion_02_multi_period_vs_oracle(tmp_path, capsys):
    path = tmp_path / "bin2.json"
    inst.bin2().dump(path)
    t0 = time.perf_counter()
    code = run(["solve", str(path), "--json"])
    elapsed = time.perf_counter() - t0
    U0 = json.loads(capsys.readouterr().out)["value"]
    bf = brute_force_value(inst.bin2(), 1.0).value
    v1 = solve_one_period(_root_problem(inst.bin1())).value
    e1, e2 = abs(U0 - bf), abs(U0 - 2 * v1)
    ok = code == 0 and e1 <= 1e-4 and e2 <= 1e-4 and elapsed < 10.0
    _verdict(2, "BIN2 DP vs oracle and log separability", ok,
             f"|U-bf|={e1:.2e}, |U-2v|={e2:.2e}, {elapsed:.2f}s")


def test_criterion_03_position_bound():
    worst, bad = -math.inf, []
    for seed, s in zip(inst.RANDOM_SEEDS, _random_solved()):
        for node, rec in s.trace.records.items():
            if rec.h is None:
                continue
            bound = rec.wealth / s.report.alpha_cert(node) + 1e-9
            slack = float(np.linalg.norm(rec.h)) - bound
            worst = max(worst, slack)
            if slack > 0:
                bad.append((seed, node))
    _verdict(3, "position bound |h| <= X/alpha + 1e-9 on 50 instances", not bad,
             f"max |h| - bound = {worst:.2e}, violations {bad[:5]}")


def test_criterion_04_na_detection(tmp_path, capsys):
    m = inst.one_sided()
    path = tmp_path / "arb.json"
    m.dump(path)
    code = run(["solve", str(path)])
    diag = json.loads(capsys.readouterr().err.splitlines()[0])
    cert_ok = True
    for node, h in diag["certificates"].items():
        gains = [sum(Fraction(a) * b for a, b in zip(h, y)) for _, y in _increments(m, node)]
        cert_ok &= all(g >= 0 for g in gains) and any(g > 0 for g in gains)
    good = tmp_path / "bin1.json"
    inst.bin1().dump(good)
    bin1_code = run(["check-na", str(good)])
    capsys.readouterr()
    mismatches = []
    for seed in inst.RANDOM_SEEDS:
        sm = random_model(seed, single_prior=True, require_na=False)
        if check_na_global(sm, with_sna=False).na_qT != _single_measure_na(sm):
            mismatches.append(seed)
    ok = code == 2 and cert_ok and bin1_code == 0 and not mismatches
    _verdict(4, "no-arbitrage detection", ok,
             f"exit {code}, certificate {'ok' if cert_ok else 'bad'}, BIN1 exit {bin1_code}, "
             f"single-prior mismatches {mismatches}")


def test_criterion_05_alpha_construction():
    checked, bad = 0, []
    for s in _all_solved():
        for node, r in s.report.nodes.items():
            g, margin = r.geometry, r.verdict.margin
            if g.dim > 1:
                continue
            if g.dim == 0:
                expected = 1
            else:
                kids = s.model.children(node)
                P = s.model.vertices(node)[:, [kids.index(c) for c in g.children]]
                expected = _exact_n0(g.support_points @ g.d_basis[:, 0], P)
            checked += 1
            if margin.n0 != expected or margin.alpha != 1.0 / expected:
                bad.append((node, margin.n0, expected))
    bin1_alpha = inst.solved_named("bin1").report.nodes["root"].verdict.margin.alpha
    ok = not bad and bin1_alpha == 0.5
    _verdict(5, "alpha equals exact n0 enumeration on dim <= 1 nodes", ok,
             f"{checked} nodes, mismatches {bad[:5]}, BIN1 alpha = {bin1_alpha}")


def test_criterion_06_rational_approximation():
    models = [("BIN1", inst.bin1())] + [
        (f"seed {s}", random_model(s, horizon=1)) for s in inst.RATIONAL_SEEDS
    ]
    worst, bad = 0.0, []
    for name, m in models:
        pb = _root_problem(m)
        seq = rational_sup_check(pb)
        vals = [v for _, v, _ in seq]
        target = solve_one_period(pb).value
        mono = all(b >= a for a, b in zip(vals, vals[1:]))
        err = abs(vals[-1] - target)
        worst = max(worst, err)
        if not mono or err > 1e-6:
            bad.append((name, mono, f"{err:.2e}"))
    _verdict(6, "dyadic rational sup converges to the solver value by level 16", not bad,
             f"{len(models)} instances, worst |v16 - U| = {worst:.2e}, failures {bad}")


def test_criterion_07_table_shapes():
    total, bad = 0, []
    for s in _all_solved():
        surfaces = [s.surface] + ([s.trace.surface] if s.trace.surface is not None else [])
        for surf in surfaces:
            for node, t in surf.tables.items():
                total += 1
                if not (t.is_concave() and t.is_monotone()):
                    bad.append(node)
    _verdict(7, "value tables concave and non-decreasing", not bad,
             f"{total} tables on {len(_all_solved())} instances, failures {bad[:5]}")


def test_criterion_08_policy_optimality():
    cases = [("BIN1", inst.solved_named("bin1")), ("BIN2", inst.solved_named("bin2"))]
    cases += [(f"seed {s}", inst.solved_random(s)) for s in inst.ORACLE_SEEDS]
    worst_fixed, worst_excess, bad = 0.0, -math.inf, []
    for name, s in cases:
        U0 = s.trace.value
        fixed = fixed_strategy_worst_case(s.model, s.trace.profile(), s.trace.x0)
        bf = brute_force_value(s.model, s.trace.x0, na_report=s.report).value
        e = abs(fixed - U0)
        worst_fixed = max(worst_fixed, e)
        worst_excess = max(worst_excess, bf - U0)
        if e > 1e-6 or bf > U0 + 1e-4:
            bad.append(name)
    _verdict(8, "extracted policy attains U_0 and no oracle profile beats it", not bad,
             f"{len(cases)} instances, max |fixed - U| = {worst_fixed:.2e}, "
             f"max oracle - U = {worst_excess:.2e}, failures {bad}")


def test_criterion_09_wealth_floor():
    solved = _all_solved()
    bad = [i for i, s in enumerate(solved) if not robust_wealth_floor(s.model, s.trace)]
    floor = min(r.wealth for s in solved for r in s.trace.records.values())
    _verdict(9, "robust wealth floor on every extracted trace", not bad,
             f"{len(solved)} traces, lowest wealth {floor:.2e}, failures {bad}")


def test_criterion_10_diagnostics():
    m = inst.bin1()
    J = compute_J(m, [Fraction(1), Fraction(1, 2)])
    exact = all(v == 0.0 for v in J[Fraction(1)].values()) and all(
        v == math.log(2.0) for v in J[Fraction(1, 2)].values()
    )
    el_log = check_elasticity(m, pairs=1000)
    el_pow = check_elasticity(binomial_model(1, 2.0, 0.5, 0.4, 0.6, utility="power", power=0.5),
                              pairs=1000)
    ok = exact and el_log.passed and el_pow.passed
    _verdict(10, "J^r recursion exact and growth inequality on 1000 pairs", ok,
             f"J exact {exact}, log margin {el_log.worst_margin:.3g}, "
             f"power margin {el_pow.worst_margin:.3g}")


def test_criterion_11_sna_vs_na():
    deg = check_na_global(inst.bin1().with_priors({"root": [[0.4, 0.6], [0.6, 0.4], [1.0, 0.0]]}))
    example = deg.sna is False and deg.na_qT is True
    reports = [check_na_global(random_model(s, require_na=False)) for s in inst.RANDOM_SEEDS]
    reports += [s.report for s in _random_solved()]
    bad = [i for i, r in enumerate(reports) if r.sna and not r.na_qT]
    counts = {
        "sNA": sum(bool(r.sna) for r in reports),
        "NA": sum(r.na_qT for r in reports),
    }
    _verdict(11, "degenerate vertex breaks sNA only; sNA implies NA", example and not bad,
             f"example sna={deg.sna} na={deg.na_qT}, {len(reports)} reports {counts}, "
             f"violations {bad}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
