"""Command line front end.

Exit status is 0 on success, 1 when a computation fails and 2 on bad usage.
Failures print one JSON object ``{"error": <category>, "message": ...}`` to
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

import numpy as np

from . import bench
from .errors import DPCCError, OutOfRange
from .mechanisms import iterative, output_perturbation, pareto_sweep, release_query
from .network import build_program, load_case
from .noise import GAUSSIAN, LAPLACE
from .problem import PrivacyParams, QuerySpec, check_implementable, solve_base, validate_program
from .reform import ANALYTIC, COST_VARIANCE, NO_VARIANCE, SCENARIO, SOLUTION_VARIANCE, FeasibilitySpec, VarianceSpec
from .solver import Status

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", message)
        raise SystemExit(EXIT_USAGE)


def _report(category, message):
    print(json.dumps({"error": category, "message": str(message)}), file=sys.stderr)


def parse_query(text):
    """``identity:0.3`` (fraction), ``identity:0,2,5`` (indices), ``sum:9``
    (group count) or ``sum:0,1/2,3`` (explicit groups)."""
    kind, _, spec = text.partition(":")
    if kind not in ("identity", "sum"):
        raise OutOfRange(f"query kind must be identity or sum, got {kind!r}")
    out = {"query_kind": kind}
    if not spec:
        return out
    try:
        if kind == "identity":
            if "." in spec:
                out["fraction"] = float(spec)
            else:
                out["indices"] = tuple(int(i) for i in spec.split(","))
        elif "," in spec or "/" in spec:
            out["group_indices"] = tuple(tuple(int(i) for i in g.split(",")) for g in spec.split("/"))
        else:
            out["groups"] = int(spec)
    except ValueError:
        raise OutOfRange(f"cannot read query spec {spec!r}") from None
    return out


def parse_phi(text):
    """``start:stop:step`` (inclusive) or a comma list."""
    try:
        if ":" in text:
            a, b, s = (float(v) for v in text.split(":"))
            if s <= 0:
                raise ValueError
            k = int(np.floor((b - a) / s + 1e-9))
            return [round(a + i * s, 12) for i in range(k + 1)]
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise OutOfRange(f"cannot read phi grid {text!r}") from None


def _common(p):
    p.add_argument("--case", required=True, help="case file (MATPOWER subset or JSON)")
    p.add_argument("--format", choices=["matpower_subset", "json"], default=None)
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--linear-cost", action="store_true", help="drop the quadratic cost terms")


def _privacy_flags(p):
    p.add_argument("--query", default="identity:0.3")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--eta", type=float, default=0.025)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--reform", choices=[ANALYTIC, SCENARIO], default=ANALYTIC)
    p.add_argument("--variance", choices=[NO_VARIANCE, COST_VARIANCE, SOLUTION_VARIANCE], default=None)


def build_parser():
    parser = _Parser(prog="dpcc", description="Private identity and sum queries with feasibility guarantees.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="deterministic optimum of the case")
    _common(p)

    p = sub.add_parser("release", help="one private release")
    _common(p)
    _privacy_flags(p)
    p.add_argument("--mechanism", choices=["piq", "psq", "piq-iterative", "psq-iterative", "op"], default=None)
    p.add_argument("--mu", type=float, default=0.001)
    p.add_argument("--phi", type=float, default=0.0)

    p = sub.add_parser("bench", help="multi-run benchmark, CSV output")
    _common(p)
    _privacy_flags(p)
    p.add_argument("--mechanism", default=None, help="comma list from op,analytic,scenario")
    p.add_argument("--phi", type=float, default=0.0)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--full", action="store_true", help=f"use {bench.FULL_RUNS} runs")
    p.add_argument("--oos", type=int, default=1000)
    p.add_argument("--op-loss-samples", type=int, default=None, help="cap on OP re-solves used for its loss")
    p.add_argument("--config", default=None, help="JSON file with BenchConfig fields")

    p = sub.add_parser("pareto", help="loss/variance trade-off sweep, CSV output")
    _common(p)
    _privacy_flags(p)
    p.add_argument("--phi", default="0:1:0.1")

    p = sub.add_parser("check", help="validate the program and test query implementability")
    _common(p)
    p.add_argument("--query", default="identity:0.3")
    return parser


def _load(args):
    alloc = build_program(load_case(args.case, args.format))
    if args.linear_cost:
        alloc = replace(alloc, program=replace(alloc.program, c2=np.zeros(alloc.program.n)))
    return alloc


def _query(args, alloc):
    cfg = bench.BenchConfig(args.case, **parse_query(args.query))
    return bench.select_query(cfg, alloc.n_supply, np.random.default_rng(args.seed)).validate(alloc.program.n)


def _privacy(args):
    return PrivacyParams(args.epsilon, args.delta, args.alpha)


def _dist(args):
    return LAPLACE if args.delta == 0 else GAUSSIAN


def _emit(args, text):
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _floats(v):
    return [float(x) for x in np.asarray(v).ravel()]


def cmd_solve(args):
    alloc = _load(args)
    z, sol = solve_base(alloc.program)
    if sol.status is not Status.OPTIMAL:
        _emit(args, json.dumps({"status": sol.status.value}) + "\n")
        return EXIT_FAIL
    rec = {
        "status": sol.status.value,
        "cost": float(sol.objective),
        "supplies": _floats(alloc.supplies(z)),
        "angles": _floats(z[alloc.theta_vars]),
        "iterations": sol.iterations,
    }
    _emit(args, json.dumps(rec, indent=2) + "\n")
    return EXIT_OK


def cmd_release(args):
    alloc = _load(args)
    prog = alloc.program
    query = _query(args, alloc)
    mech = args.mechanism or ("piq" if query.kind == "identity" else "psq")
    feas = FeasibilitySpec(args.eta, mode=args.reform, beta=args.beta, seed=args.seed)
    var = VarianceSpec(args.variance or NO_VARIANCE, args.phi)
    if mech == "op":
        rel = output_perturbation(prog, query, _privacy(args), seed=args.seed)
    elif mech.endswith("-iterative"):
        rel = iterative(mech.split("-")[0], prog, query, _privacy(args), feas, args.mu, args.seed, var, _dist(args))
    else:
        expected = "identity" if mech == "piq" else "sum"
        if query.kind != expected:
            raise OutOfRange(f"{mech} needs a {expected} query")
        rel = release_query(prog, query, _privacy(args), feas, var, args.seed, _dist(args), name=mech)
    rec = rel.record()
    rec["query"] = [list(g) for g in query.rows]
    _emit(args, json.dumps(rec, indent=2) + "\n")
    return EXIT_OK


def cmd_bench(args):
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
        data.setdefault("case", args.case)
    else:
        data = {"case": args.case, "format": args.format}
        data.update(parse_query(args.query))
        data.update(
            epsilon=args.epsilon,
            delta=args.delta,
            alpha=args.alpha,
            eta=args.eta,
            beta=args.beta,
            variance=args.variance or NO_VARIANCE,
            phi=args.phi,
            oos_samples=args.oos,
            op_loss_samples=args.op_loss_samples,
            seed=args.seed,
        )
        if args.mechanism:
            data["mechanisms"] = tuple(m.strip() for m in args.mechanism.split(","))
    if args.full:
        data["runs"] = bench.FULL_RUNS
    elif args.runs is not None:
        data["runs"] = args.runs
    cfg = bench.BenchConfig.from_dict(data)
    rows = bench.run_bench(cfg)
    _emit(args, bench.write_csv(rows))
    for row in rows:
        logging.getLogger(__name__).info("%s: %.2fs", row.mechanism, row.wall_time)
    return EXIT_OK


def cmd_pareto(args):
    alloc = _load(args)
    query = _query(args, alloc)
    feas = FeasibilitySpec(args.eta, mode=args.reform, beta=args.beta, seed=args.seed)
    mode = args.variance or SOLUTION_VARIANCE
    rows = pareto_sweep(alloc.program, query, _privacy(args), feas, mode, parse_phi(args.phi), seed=args.seed)
    _emit(args, bench.write_frontier_csv(rows))
    return EXIT_OK


def cmd_check(args):
    alloc = _load(args)
    rep = validate_program(alloc.program)
    query = _query(args, alloc)
    ok = rep.valid and check_implementable(alloc.program, query)
    lines = [f"valid: {str(rep.valid).lower()}"]
    lines += [f"error: {e}" for e in rep.errors]
    lines += [f"warning: {w}" for w in rep.warnings]
    lines.append(f"query: {query.kind} {[list(g) for g in query.rows]}")
    lines.append(f"implementable: {str(bool(ok)).lower()}")
    _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"solve": cmd_solve, "release": cmd_release, "bench": cmd_bench, "pareto": cmd_pareto, "check": cmd_check}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DPCCError as exc:
        _report(exc.category, exc)
        return EXIT_FAIL
    except OSError as exc:
        _report("io", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
