"""Command-line front end.

Exit status: 0 on success, 2 when no-arbitrage fails (the certificate is
printed), 1 on any other error (invalid model, bad arguments, solver error).
Every error prints one JSON line on stderr followed by a human sentence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .arbitrage import NAReport, check_na_global
from .dp_engine import (
    GridSpec,
    backward_induct,
    build_grid,
    diagnostics,
    extract_policy,
    node_problem,
    robust_wealth_floor,
    _continuations,
)
from .exceptions import RobustDPError
from .generate import binomial_model, random_model, trinomial_model
from .market_model import MarketModel, validate_model
from .oracle import brute_force_value, fixed_strategy_worst_case
from .saddle import solve_one_period

EXIT_OK, EXIT_INVALID, EXIT_ARBITRAGE = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    """Validated command-line configuration."""

    command: str
    model: Path | None = None
    x0: float = 1.0
    knots: int = 257
    seed: int = 0
    threads: int | None = None
    directions: int = 10_000
    emit_values: Path | None = None
    emit_policy: Path | None = None
    as_json: bool = False

    def __post_init__(self) -> None:
        if not self.x0 >= 0:
            raise ValueError("x0 must be >= 0")
        if self.knots < 17:
            raise ValueError("--knots must be >= 17")
        if self.directions < 4:
            raise ValueError("--directions must be >= 4")


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int, extra: dict | None = None):
        super().__init__(message)
        self.kind, self.code, self.extra = kind, code, extra or {}


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _emit_error(err: CLIError) -> int:
    diag = {"error": err.kind, "message": str(err), "exit": err.code, **err.extra}
    print(json.dumps(diag), file=sys.stderr)
    print(f"robustdp: {err}", file=sys.stderr)
    return err.code


def _load(path: Path) -> MarketModel:
    try:
        model = MarketModel.load(path)
    except FileNotFoundError:
        raise CLIError("io", f"cannot read {path}", EXIT_INVALID) from None
    except RobustDPError as exc:
        raise CLIError("model", str(exc), EXIT_INVALID) from None
    rep = validate_model(model)
    if not rep.valid:
        raise CLIError(
            "validation", f"{len(rep.violations)} violation(s): " + "; ".join(rep.violations),
            EXIT_INVALID, {"violations": list(rep.violations)},
        )
    for w in rep.warnings:
        print(f"robustdp: warning: {w}", file=sys.stderr)
    return model


def _na_gate(report: NAReport) -> None:
    if report.na_qT:
        return
    certs = {
        n: r.verdict.certificate.tolist() for n, r in report.nodes.items() if not r.verdict.holds
    }
    node = next(iter(certs))
    raise CLIError(
        "arbitrage",
        f"no-arbitrage fails at node {node!r}: position {certs[node]} never loses and may gain",
        EXIT_ARBITRAGE,
        {"certificates": certs},
    )


def _print(cfg: RunConfig, doc: dict, lines: Sequence[str]) -> None:
    if cfg.as_json:
        print(json.dumps(doc, indent=2))
    else:
        for line in lines:
            print(line)


# subcommands


def cmd_check_na(cfg: RunConfig) -> int:
    model = _load(cfg.model)
    report = check_na_global(model, directions=cfg.directions, seed=cfg.seed)
    print(json.dumps(report.to_dict(), indent=2))
    _na_gate(report)
    return EXIT_OK


def _solve(cfg: RunConfig, model: MarketModel):
    report = check_na_global(model, directions=cfg.directions, seed=cfg.seed)
    _na_gate(report)
    grid = build_grid(model, cfg.x0, report, GridSpec(n_knots=cfg.knots))
    surface = backward_induct(model, report, grid, workers=cfg.threads)
    return report, surface


def cmd_solve(cfg: RunConfig) -> int:
    model = _load(cfg.model)
    report, surface = _solve(cfg, model)
    trace = extract_policy(model, surface, cfg.x0)
    if cfg.emit_values:
        with open(cfg.emit_values, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "depth", "wealth_knot", "value"])
            for node, tab in surface.tables.items():
                depth = model.node(node).depth
                for k, v in zip(tab.knots, tab.values):
                    w.writerow([node, depth, _fmt(k), _fmt(v)])
    if cfg.emit_policy:
        d = model.asset_count
        with open(cfg.emit_policy, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["node_id", "depth", "realized_wealth"]
                + [f"h_{i + 1}" for i in range(d)]
                + ["worst_vertex", "continuation_value"]
            )
            for rec in trace.records.values():
                hs = [_fmt(v) for v in rec.h] if rec.h is not None else [""] * d
                wv = "" if rec.worst_vertex is None else str(rec.worst_vertex)
                w.writerow(
                    [rec.node, rec.depth, _fmt(rec.wealth)] + hs + [wv, _fmt(rec.continuation_value)]
                )
    root = trace.records[model.root]
    doc = {
        "value": trace.value,
        "x0": cfg.x0,
        "h_root": list(root.h) if root.h is not None else [],
        "worst_vertex_root": root.worst_vertex,
        "converged": trace.converged,
        "wealth_floor": robust_wealth_floor(model, trace),
        "grid_upper": {str(t): u for t, u in surface.grid.upper.items()},
    }
    lines = [
        f"U_0({cfg.x0:g}) = {trace.value:.12g}",
        f"root position h = {[float(f'{v:.12g}') for v in doc['h_root']]}, "
        f"worst vertex {root.worst_vertex}",
    ]
    _print(cfg, doc, lines)
    return EXIT_OK


def cmd_solve_one_period(cfg: RunConfig, node: str, x: float) -> int:
    model = _load(cfg.model)
    if node not in model.node_map or model.is_leaf(node):
        raise CLIError("argument", f"{node!r} is not an internal node", EXIT_INVALID)
    report = check_na_global(model, directions=cfg.directions, seed=cfg.seed)
    if node not in report.nodes:
        raise CLIError("argument", f"node {node!r} is polar", EXIT_INVALID)
    if not report.nodes[node].verdict.holds:
        _na_gate(report)
    tables = {}
    if any(not model.is_leaf(c) for c in model.children(node)):
        _na_gate(report)
        # continuation tables cover any wealth up to x times the growth bound
        grid = build_grid(model, x, report, GridSpec(n_knots=cfg.knots))
        tables = backward_induct(model, report, grid, workers=cfg.threads).tables
    prob = node_problem(model, report, node, x, _continuations(model, node, tables))
    sol = solve_one_period(prob)
    doc = {
        "node": node,
        "x": x,
        "value": sol.value,
        "h_opt": sol.h_opt.tolist(),
        "worst_vertex": sol.worst_vertex,
        "gap": None if math.isnan(sol.gap) else sol.gap,
        "degenerate": sol.degenerate,
        "nonunique": sol.nonunique,
    }
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, grid_step: float | None, max_evals: int) -> int:
    model = _load(cfg.model)
    report = check_na_global(model, with_sna=False, directions=cfg.directions, seed=cfg.seed)
    _na_gate(report)
    res = brute_force_value(
        model, cfg.x0, grid_step=grid_step, max_evals=max_evals, seed=cfg.seed, na_report=report
    )
    doc = {
        "value": res.value,
        "profile": {k: v.reshape(-1).tolist() for k, v in res.profile.items()},
        "evaluations": res.evaluations,
        "method": res.method,
    }
    lines = [f"oracle value = {res.value:.12g} ({res.evaluations} profiles, {res.method})"]
    lines += [f"  {k}: {[float(f'{x:.10g}') for x in v]}" for k, v in doc["profile"].items()]
    _print(cfg, doc, lines)
    return EXIT_OK


def cmd_oracle_eval(cfg: RunConfig, profile_path: Path) -> int:
    model = _load(cfg.model)
    try:
        with open(profile_path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CLIError("io", f"cannot read profile {profile_path}: {exc}", EXIT_INVALID) from None
    profile = {str(k): np.atleast_1d(np.asarray(v, dtype=float)) for k, v in raw.items()}
    for k, v in profile.items():
        if k not in model.node_map or v.shape != (model.asset_count,):
            raise CLIError("profile", f"bad profile entry for {k!r}", EXIT_INVALID)
    value = fixed_strategy_worst_case(model, profile, cfg.x0)
    _print(cfg, {"value": value}, [f"worst-case value = {value:.12g}"])
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, pairs: int, m_x: bool) -> int:
    model = _load(cfg.model)
    rs = (Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2))
    diag = diagnostics(model, rs, pairs=pairs, seed=cfg.seed, m_x=m_x)
    root = model.root
    el = diag.elasticity
    doc: dict[str, Any] = {
        "J_root": {str(r): diag.J[r][root] for r in rs},
        "assumption2": diag.assumption2,
        "elasticity": {"pairs": el.pairs, "passed": el.passed, "worst_margin": el.worst_margin},
        "M_1": diag.m_x,
        "M_1_finite": diag.m_finite,
        "notes": list(diag.notes),
    }
    lines = [f"J^{r}_0 = {diag.J[r][root]:.12g}" for r in rs]
    lines.append(f"elasticity check: {'pass' if el.passed else 'FAIL'} on {el.pairs} pairs")
    lines.append(f"M_1 estimate: {diag.m_x}")
    _print(cfg, doc, lines)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    if args.random:
        model = random_model(args.seed, horizon=args.periods, require_na=not args.allow_arbitrage)
    elif args.mid is not None:
        model = trinomial_model(
            args.periods, args.up, args.mid, args.down, args.p_lo, args.p_hi,
            q_mid=args.q_mid, s0=args.s0, utility=args.utility, power=args.power,
        )
    else:
        model = binomial_model(
            args.periods, args.up, args.down, args.p_lo, args.p_hi,
            s0=args.s0, utility=args.utility, power=args.power,
        )
    text = json.dumps(model.to_dict(), indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# parser


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 so that status 2 always means arbitrage."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.exit(_emit_error(CLIError("usage", message, EXIT_INVALID)))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="robustdp",
        description="Worst-case optimal investment on finite scenario trees.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, x0=True):
        sp.add_argument("model", type=Path, help="model file (JSON)")
        if x0:
            sp.add_argument("--x0", type=float, default=1.0, help="initial wealth (default 1)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--directions", type=int, default=10_000,
                        help="sphere directions for margins on dim >= 2 nodes")
        sp.add_argument("--json", action="store_true", help="print a JSON document")

    sp = sub.add_parser("check-na", help="no-arbitrage report (JSON)")
    common(sp, x0=False)

    sp = sub.add_parser("solve", help="backward induction and optimal policy")
    common(sp)
    sp.add_argument("--knots", type=int, default=257)
    sp.add_argument("--threads", type=int, default=None,
                    help="worker threads per depth (default: ROBUSTDP_THREADS or 1; 0 = auto)")
    sp.add_argument("--emit-values", type=Path)
    sp.add_argument("--emit-policy", type=Path)

    sp = sub.add_parser("solve-one-period", help="single-node solve (debugging)")
    common(sp, x0=False)
    sp.add_argument("--node", default=None, help="internal node id (default: root)")
    sp.add_argument("--x", type=float, default=1.0, help="wealth at the node")
    sp.add_argument("--knots", type=int, default=257)
    sp.add_argument("--threads", type=int, default=None)

    sp = sub.add_parser("oracle", help="brute-force strategy search")
    common(sp)
    sp.add_argument("--grid-step", type=float, default=None)
    sp.add_argument("--max-evals", type=int, default=10**7)

    sp = sub.add_parser("oracle-eval", help="worst-case value of a given strategy")
    common(sp)
    sp.add_argument("profile", type=Path, help="JSON map node id -> position")

    sp = sub.add_parser("diagnose", help="J^r, growth inequality and M_1")
    common(sp, x0=False)
    sp.add_argument("--pairs", type=int, default=1000)
    sp.add_argument("--no-mx", action="store_true", help="skip the M_1 search")

    sp = sub.add_parser("generate", help="emit a lattice or random model")
    sp.add_argument("--periods", type=int, default=1)
    sp.add_argument("--up", type=float, default=2.0)
    sp.add_argument("--down", type=float, default=0.5)
    sp.add_argument("--mid", type=float, default=None, help="middle factor (trinomial)")
    sp.add_argument("--q-mid", type=float, default=0.2)
    sp.add_argument("--p-lo", type=float, default=0.4)
    sp.add_argument("--p-hi", type=float, default=0.6)
    sp.add_argument("--s0", type=float, default=1.0)
    sp.add_argument("--utility", choices=["log", "power", "piecewise_linear"], default="log")
    sp.add_argument("--power", type=float, default=None)
    sp.add_argument("--random", action="store_true", help="seeded random instance")
    sp.add_argument("--allow-arbitrage", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--output", type=Path)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args)
        try:
            cfg = RunConfig(
                command=args.command,
                model=args.model,
                x0=getattr(args, "x0", 1.0),
                knots=getattr(args, "knots", 257),
                seed=args.seed,
                threads=getattr(args, "threads", None),
                directions=args.directions,
                emit_values=getattr(args, "emit_values", None),
                emit_policy=getattr(args, "emit_policy", None),
                as_json=args.json,
            )
        except ValueError as exc:
            raise CLIError("argument", str(exc), EXIT_INVALID) from None
        if args.command == "check-na":
            return cmd_check_na(cfg)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "solve-one-period":
            model_root = args.node
            if model_root is None:
                model_root = _load(cfg.model).root
            return cmd_solve_one_period(cfg, model_root, args.x)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.grid_step, args.max_evals)
        if args.command == "oracle-eval":
            return cmd_oracle_eval(cfg, args.profile)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, args.pairs, not args.no_mx)
    except CLIError as err:
        return _emit_error(err)
    except RobustDPError as exc:
        return _emit_error(CLIError(type(exc).__name__, str(exc), EXIT_INVALID))
    return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
