"""Multi-run benchmark harness: violation rates, optimality loss, CSV output.

Each run draws a fresh instance on the case topology and a fresh query, then
evaluates every requested mechanism against the same out-of-sample noise
draws.  Seeds for a run come from ``SeedSequence(seed).spawn(runs)`` so runs
are independent and the whole table is reproducible from one integer.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import DegenerateBase, DPCCError, OutOfRange
from .mechanisms import base_answer, op_certificate, op_feasible
from .network import build_program, load_case, random_instance
from .noise import GAUSSIAN, LAPLACE, calibrate, sample
from .problem import PrivacyParams, QuerySpec, solve_base
from .reform import ANALYTIC, NO_VARIANCE, SCENARIO, FeasibilitySpec, VarianceSpec, solve_recourse
from .solver import Status

logger = logging.getLogger(__name__)

VIOLATION_TOL = 1e-6
DESK_RUNS = 20
FULL_RUNS = 100
MECHANISMS = ("op", ANALYTIC, SCENARIO)


@dataclass
class BenchConfig:
    case: str
    format: str | None = None
    query_kind: str = "identity"
    fraction: float = 0.3
    indices: tuple | None = None
    groups: int = 1
    group_indices: tuple | None = None
    epsilon: float = 1.0
    delta: float = 0.0
    alpha: float = 0.1
    eta: float = 0.025
    beta: float = 0.01
    variance: str = NO_VARIANCE
    phi: float = 0.0
    mechanisms: tuple = MECHANISMS
    runs: int = DESK_RUNS
    oos_samples: int = 1000
    op_loss_samples: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.query_kind not in ("identity", "sum"):
            raise OutOfRange(f"unknown query kind {self.query_kind!r}")
        if not 0 < self.fraction < 1:
            raise OutOfRange(f"fraction must lie in (0, 1), got {self.fraction}")
        if self.runs < 1:
            raise OutOfRange(f"runs must be at least 1, got {self.runs}")
        if self.oos_samples < 1:
            raise OutOfRange(f"oos_samples must be at least 1, got {self.oos_samples}")
        if self.op_loss_samples is not None and self.op_loss_samples < 1:
            raise OutOfRange(f"op_loss_samples must be at least 1, got {self.op_loss_samples}")
        if self.groups < 1:
            raise OutOfRange(f"groups must be at least 1, got {self.groups}")
        bad = [m for m in self.mechanisms if m not in MECHANISMS]
        if bad:
            raise OutOfRange(f"unknown mechanisms {bad}; choose from {list(MECHANISMS)}")
        self.mechanisms = tuple(self.mechanisms)
        if self.indices is not None:
            self.indices = tuple(int(i) for i in self.indices)
        if self.group_indices is not None:
            self.group_indices = tuple(tuple(int(i) for i in g) for g in self.group_indices)
        VarianceSpec(self.variance, self.phi)

    @property
    def privacy(self):
        return PrivacyParams(self.epsilon, self.delta, self.alpha)

    @property
    def distribution(self):
        return LAPLACE if self.delta == 0 else GAUSSIAN

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise OutOfRange(f"unknown config keys {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class RunResult:
    run: int
    mechanism: str
    violation: float = math.nan
    violation_within: float = math.nan
    loss: float = math.nan
    loss_within: float = math.nan
    released: tuple = ()
    error: str = ""
    wall_time: float = 0.0


@dataclass
class BenchRow:
    """Aggregate over runs for one mechanism (all figures in percent).

    ``*_std`` is the spread across runs (instance and query drawn jointly);
    ``*_std_within`` pools the Monte-Carlo spread inside each run.
    """

    mechanism: str
    runs: list = field(default_factory=list, repr=False)
    violation_mean: float = math.nan
    violation_std: float = math.nan
    violation_std_within: float = math.nan
    loss_mean: float = math.nan
    loss_std: float = math.nan
    loss_std_within: float = math.nan
    failed: int = 0
    wall_time: float = 0.0

    @property
    def violations(self):
        return np.array([r.violation for r in self.runs if not r.error])

    @property
    def losses(self):
        return np.array([r.loss for r in self.runs if not r.error])


def mechanism_label(mech, kind):
    prefix = "PIQ" if kind == "identity" else "PSQ"
    return {"op": "OP", ANALYTIC: f"{prefix}-a", SCENARIO: f"{prefix}-s"}[mech]


def _violated(prog, z, tol=VIOLATION_TOL):
    if prog.m == 0:
        return np.zeros(z.shape[0], dtype=bool)
    return np.any(z @ prog.A.T.toarray() > prog.b + tol, axis=1)


def empirical_violation(recourse, prog, n_samples, seed, tol=VIOLATION_TOL):
    """Fraction of ``n_samples`` noise draws whose realised point breaks an inequality."""
    xi = sample(recourse.noise, seed, size=n_samples)
    return float(np.mean(_violated(prog, recourse.realize(xi), tol)))


def optimality_loss(recourse, prog, base_cost=None):
    """``100 (E[cost] - cost*) / |cost*|`` against the deterministic optimum."""
    if base_cost is None:
        z, sol = solve_base(prog)
        if sol.status is not Status.OPTIMAL:
            raise DegenerateBase(f"deterministic solve ended with status {sol.status.value}")
        base_cost = float(prog.cost(z))
    if abs(base_cost) < 1e-12:
        raise DegenerateBase("deterministic optimum has zero cost")
    return 100.0 * (recourse.expected_cost - base_cost) / abs(base_cost)


def _run_seeds(seed, runs):
    out = []
    for child in np.random.SeedSequence(seed).spawn(runs):
        out.append([int(s.generate_state(1, np.uint64)[0]) for s in child.spawn(4)])
    return out


def select_query(cfg, n_supply, rng):
    """Query for one run; indices are positions among the supply variables."""
    if cfg.query_kind == "identity":
        if cfg.indices is not None:
            return QuerySpec.identity(cfg.indices)
        k = max(1, math.floor(cfg.fraction * n_supply))
        return QuerySpec.identity(sorted(rng.choice(n_supply, size=k, replace=False).tolist()))
    if cfg.group_indices is not None:
        return QuerySpec.sum(cfg.group_indices)
    k = max(cfg.groups, math.floor(cfg.fraction * n_supply))
    if k > n_supply:
        raise OutOfRange(f"{cfg.groups} groups need at least that many supplies, case has {n_supply}")
    chosen = rng.choice(n_supply, size=k, replace=False)
    return QuerySpec.sum(sorted(sorted(g.tolist()) for g in np.array_split(chosen, cfg.groups)))


def _pct_std(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def _loss_samples(prog, z, base_cost):
    return 100.0 * (prog.cost(z) - base_cost) / abs(base_cost)


def _run_recourse(cfg, mech, prog, query, noise, box_seed, xi, base_cost):
    feas = FeasibilitySpec(cfg.eta, mode=mech, beta=cfg.beta, seed=box_seed)
    rec = solve_recourse(prog, query, noise, feas, VarianceSpec(cfg.variance, cfg.phi))
    z = rec.realize(xi)
    bad = _violated(prog, z)
    rate = float(np.mean(bad))
    return (
        100.0 * rate,
        100.0 * math.sqrt(rate * (1.0 - rate)),
        optimality_loss(rec, prog, base_cost),
        float(np.std(_loss_samples(prog, z, base_cost))),
    )


def _run_op(prog, query, base, xi, loss_samples=None):
    ok = np.array([op_feasible(prog, base.S, base.answer + x) for x in xi])
    rate = 1.0 - float(np.mean(ok))
    losses = []
    # each loss needs a full re-solve; optionally only the first feasible draws
    for x in xi[ok][:loss_samples]:
        _, z = op_certificate(prog, base.S, base.answer + x)
        if z is not None:
            losses.append(float(_loss_samples(prog, z, base.cost)))
    losses = np.asarray(losses)
    return (
        100.0 * rate,
        100.0 * math.sqrt(rate * (1.0 - rate)),
        float(np.mean(losses)) if losses.size else math.nan,
        float(np.std(losses)) if losses.size else math.nan,
    )


def run_once(cfg, topology, run, seeds):
    """All mechanisms on one instance; returns one RunResult per mechanism."""
    s_inst, s_query, s_box, s_oos = seeds
    case = random_instance(topology, s_inst)
    alloc = build_program(case)
    prog = alloc.program
    out = []
    try:
        query = select_query(cfg, alloc.n_supply, np.random.default_rng(s_query)).validate(prog.n)
        base = base_answer(prog, query)
        if abs(base.cost) < 1e-12:
            raise DegenerateBase("deterministic optimum has zero cost")
        noise = calibrate(cfg.privacy, cfg.distribution, dim=query.p)
    except DPCCError as exc:
        return [RunResult(run, mechanism_label(m, cfg.query_kind), error=exc.category) for m in cfg.mechanisms]
    # common random numbers: every mechanism sees the same draws
    xi = sample(noise, s_oos, size=cfg.oos_samples)
    released = tuple(query.released or query.groups)
    for mech in cfg.mechanisms:
        res = RunResult(run, mechanism_label(mech, cfg.query_kind), released=released)
        t0 = time.perf_counter()
        try:
            if mech == "op":
                vals = _run_op(prog, query, base, xi, cfg.op_loss_samples)
            else:
                vals = _run_recourse(cfg, mech, prog, query, noise, s_box, xi, base.cost)
            res.violation, res.violation_within, res.loss, res.loss_within = vals
        except DPCCError as exc:
            res.error = exc.category
            logger.info("run %d %s failed: %s", run, res.mechanism, exc)
        res.wall_time = time.perf_counter() - t0
        out.append(res)
    return out


def aggregate(label, results):
    row = BenchRow(label, list(results))
    ok = [r for r in results if not r.error]
    row.failed = len(results) - len(ok)
    row.wall_time = float(sum(r.wall_time for r in results))
    if not ok:
        return row
    v = np.array([r.violation for r in ok])
    vw = np.array([r.violation_within for r in ok])
    row.violation_mean = float(np.mean(v))
    row.violation_std = _pct_std(v)
    row.violation_std_within = float(np.sqrt(np.mean(vw**2)))
    loss = np.array([r.loss for r in ok])
    lw = np.array([r.loss_within for r in ok])
    finite = np.isfinite(loss)
    if finite.any():
        row.loss_mean = float(np.mean(loss[finite]))
        row.loss_std = _pct_std(loss[finite])
        row.loss_std_within = float(np.sqrt(np.mean(lw[finite] ** 2)))
    return row


def run_bench(cfg):
    """Run the protocol; returns one BenchRow per mechanism in config order."""
    topology = load_case(cfg.case, cfg.format)
    per_mech = {}
    for run, seeds in enumerate(_run_seeds(cfg.seed, cfg.runs)):
        for res in run_once(cfg, topology, run, seeds):
            per_mech.setdefault(res.mechanism, []).append(res)
    return [aggregate(label, per_mech[label]) for label in (mechanism_label(m, cfg.query_kind) for m in cfg.mechanisms)]


CSV_HEADER = (
    "scope",
    "run",
    "mechanism",
    "violation_pct",
    "violation_std",
    "violation_std_within",
    "loss_pct",
    "loss_std",
    "loss_std_within",
    "failed",
    "error",
)


def fmt(v):
    """Six significant digits; integers and strings pass through."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.6g}"


def write_csv(rows, fh=None, per_run=True):
    """Write per-run rows (scope ``run``) then aggregates (scope ``all``)."""
    out = fh or io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_HEADER)
    if per_run:
        for row in rows:
            for r in row.runs:
                w.writerow(
                    [
                        "run",
                        r.run,
                        r.mechanism,
                        fmt(r.violation),
                        "",
                        fmt(r.violation_within),
                        fmt(r.loss),
                        "",
                        fmt(r.loss_within),
                        int(bool(r.error)),
                        r.error,
                    ]
                )
    for row in rows:
        w.writerow(
            [
                "all",
                "",
                row.mechanism,
                fmt(row.violation_mean),
                fmt(row.violation_std),
                fmt(row.violation_std_within),
                fmt(row.loss_mean),
                fmt(row.loss_std),
                fmt(row.loss_std_within),
                row.failed,
                "",
            ]
        )
    return out.getvalue() if fh is None else None


FRONTIER_HEADER = ("phi", "expected_loss_pct", "loss_variance", "trace_metric", "expected_cost")


def write_frontier_csv(rows, fh=None):
    out = fh or io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(FRONTIER_HEADER)
    for r in rows:
        w.writerow([fmt(r.phi), fmt(r.expected_loss), fmt(r.loss_variance), fmt(r.trace_metric), fmt(r.expected_cost)])
    return out.getvalue() if fh is None else None
