"""Resource-allocation networks: parsing, Laplacian and program construction.

Per-unit convention: powers are divided by ``baseMVA`` (default 100); linear
costs are multiplied by ``baseMVA`` and quadratic costs by ``baseMVA**2`` so
that the cost of a dispatch is unchanged.

matpower_subset columns read (1-based, as in MATPOWER):

* ``mpc.bus``: 1 bus id, 3 Pd
* ``mpc.gen``: 1 bus, 8 status, 9 Pmax, 10 Pmin
* ``mpc.branch``: 1 from, 2 to, 4 x, 6 rateA (0 = unlimited), 11 status
* ``mpc.gencost``: 1 model (must be 2), 4 ncost, then coefficients from the
  highest order down; the c2 and c1 terms are used

Several generators at one bus are merged: capacities add up and costs are
capacity-weighted averages.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import ConnectivityError, ParseError, SolverFailure
from .problem import ConvexProgram, QuerySpec, solve_base
from .solver import Status, ToleranceSpec

logger = logging.getLogger(__name__)

_FIELDS = ("n_nodes", "from_node", "to_node", "beta", "p_min", "p_max", "f_min", "f_max", "c1", "c2", "demand")


@dataclass(frozen=True, eq=False)
class NetworkCase:
    n_nodes: int
    from_node: np.ndarray
    to_node: np.ndarray
    beta: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    f_min: np.ndarray
    f_max: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    demand: np.ndarray = field(repr=False)
    base_mva: float = 100.0
    name: str = ""
    bus_ids: tuple = ()

    def __post_init__(self):
        for f in _FIELDS[1:]:
            dt = int if f in ("from_node", "to_node") else float
            object.__setattr__(self, f, np.asarray(getattr(self, f), dtype=dt))
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(range(1, self.n_nodes + 1)))
        self.check()

    @property
    def n_edges(self):
        return self.from_node.shape[0]

    @property
    def supply_nodes(self):
        return np.flatnonzero(self.p_max > 0)

    def check(self):
        N = self.n_nodes
        for f in ("p_min", "p_max", "c1", "c2", "demand"):
            if getattr(self, f).shape != (N,):
                raise ParseError(f"{f} must have one entry per node", field=f)
        for f in ("to_node", "beta", "f_min", "f_max"):
            if getattr(self, f).shape != self.from_node.shape:
                raise ParseError(f"{f} must have one entry per edge", field=f)
        if np.any(self.beta <= 0) or not np.all(np.isfinite(self.beta)):
            raise ParseError("edge weights must be positive and finite", field="beta")
        if np.any(self.p_min > self.p_max):
            raise ParseError("p_min exceeds p_max", field="p_min")
        if np.any(self.f_min > self.f_max):
            raise ParseError("f_min exceeds f_max", field="f_min")
        ends = np.concatenate([self.from_node, self.to_node])
        if ends.size and (ends.min() < 0 or ends.max() >= N):
            raise ParseError("edge endpoint outside the node range", field="from_node")
        adj = sp.csr_matrix((np.ones(self.n_edges), (self.from_node, self.to_node)), shape=(N, N))
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp != 1:
            raise ConnectivityError(f"network has {ncomp} connected components")

    def with_values(self, **kw):
        data = case_to_dict(self)
        data.update(kw)
        return case_from_dict(data)


def case_to_dict(case):
    out = {"name": case.name, "base_mva": case.base_mva, "bus_ids": list(case.bus_ids)}
    for f in _FIELDS:
        v = getattr(case, f)
        out[f] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


def case_to_json(case):
    data = case_to_dict(case)
    for f in ("f_min", "f_max"):
        # JSON has no infinity; null marks an absent limit
        data[f] = [None if not np.isfinite(x) else x for x in data[f]]
    return json.dumps(data, indent=1, sort_keys=True)


def case_from_dict(data):
    try:
        kw = {f: data[f] for f in _FIELDS}
    except KeyError as exc:
        raise ParseError("missing case field", field=exc.args[0]) from None
    for f, sign in (("f_min", -1.0), ("f_max", 1.0)):
        kw[f] = [sign * np.inf if x is None else x for x in kw[f]]
    kw["n_nodes"] = int(kw["n_nodes"])
    return NetworkCase(
        **kw,
        base_mva=float(data.get("base_mva", 100.0)),
        name=data.get("name", ""),
        bus_ids=tuple(data.get("bus_ids", ())),
    )


_TABLE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([^\[\];]+);")


def _parse_table(body, start_line, name):
    rows = []
    for off, raw in enumerate(body.split("\n")):
        line = raw.split("%", 1)[0]
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                rows.append(([float(t) for t in chunk.replace(",", " ").split()], start_line + off))
            except ValueError:
                raise ParseError(f"non-numeric entry in mpc.{name}", line=start_line + off) from None
    return rows


def _col(row, idx, name, col_name, line):
    if len(row) <= idx:
        raise ParseError(f"mpc.{name} row too short", line=line, field=col_name)
    return row[idx]


def parse_matpower(text, name=""):
    tables = {}
    scalars = {}
    for mt in _TABLE.finditer(text):
        start_line = text.count("\n", 0, mt.start(2)) + 1
        tables[mt.group(1)] = _parse_table(mt.group(2), start_line, mt.group(1))
    for ms in _SCALAR.finditer(text):
        try:
            scalars[ms.group(1)] = float(ms.group(2))
        except ValueError:
            pass
    for req in ("bus", "gen", "branch"):
        if req not in tables:
            raise ParseError(f"missing table mpc.{req}", field=req)
    base = scalars.get("baseMVA", 100.0)

    ids = []
    for row, line in tables["bus"]:
        ids.append(int(_col(row, 0, "bus", "bus_i", line)))
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate bus id in mpc.bus", field="bus_i")
    index = {b: k for k, b in enumerate(ids)}
    N = len(ids)
    demand = np.zeros(N)
    for row, line in tables["bus"]:
        demand[index[int(row[0])]] = _col(row, 2, "bus", "Pd", line) / base

    def bus_of(v, tab, fld, line):
        try:
            return index[int(v)]
        except KeyError:
            raise ParseError(f"unknown bus {int(v)} in mpc.{tab}", line=line, field=fld) from None

    p_min, p_max = np.zeros(N), np.zeros(N)
    c1w, c2w = np.zeros(N), np.zeros(N)
    gencost = tables.get("gencost", [])
    if gencost and len(gencost) != len(tables["gen"]):
        raise ParseError("mpc.gencost must have one row per generator", field="gencost")
    for g, (row, line) in enumerate(tables["gen"]):
        k = bus_of(_col(row, 0, "gen", "bus", line), "gen", "bus", line)
        status = row[7] if len(row) > 7 else 1.0
        if status <= 0:
            continue
        pmax = _col(row, 8, "gen", "Pmax", line) / base
        pmin = (row[9] if len(row) > 9 else 0.0) / base
        c1 = c2 = 0.0
        if gencost:
            crow, cline = gencost[g]
            if int(_col(crow, 0, "gencost", "model", cline)) != 2:
                raise ParseError("only polynomial (model 2) costs are supported", line=cline, field="model")
            ncost = int(_col(crow, 3, "gencost", "ncost", cline))
            coef = crow[4 : 4 + ncost]
            if len(coef) != ncost:
                raise ParseError("too few cost coefficients", line=cline, field="ncost")
            coef = coef[::-1]  # constant first
            c1 = (coef[1] if ncost > 1 else 0.0) * base
            c2 = (coef[2] if ncost > 2 else 0.0) * base**2
        p_max[k] += pmax
        p_min[k] += pmin
        c1w[k] += c1 * pmax
        c2w[k] += c2 * pmax
    cap = np.where(p_max > 0, p_max, 1.0)
    c1, c2 = c1w / cap, c2w / cap

    frm, to, beta, fmax = [], [], [], []
    for row, line in tables["branch"]:
        status = row[10] if len(row) > 10 else 1.0
        if status <= 0:
            continue
        x = _col(row, 3, "branch", "x", line)
        if x == 0:
            raise ParseError("branch reactance x = 0 gives an infinite edge weight", line=line, field="x")
        frm.append(bus_of(row[0], "branch", "fbus", line))
        to.append(bus_of(_col(row, 1, "branch", "tbus", line), "branch", "tbus", line))
        beta.append(1.0 / abs(x))
        rate = row[5] if len(row) > 5 else 0.0
        fmax.append(rate / base if rate > 0 else np.inf)
    fmax = np.asarray(fmax, dtype=float)
    return NetworkCase(N, frm, to, beta, p_min, p_max, -fmax, fmax, c1, c2, demand, base, name, tuple(ids))


def parse_case(text, format="matpower_subset", name=""):
    if format == "matpower_subset":
        return parse_matpower(text, name)
    if format == "json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        return case_from_dict(data)
    raise ParseError(f"unknown case format {format!r}", field="format")


def load_case(path, format=None):
    path = str(path)
    if format is None:
        format = "json" if path.endswith(".json") else "matpower_subset"
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stem = path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return parse_case(text, format, name=stem)


def incidence(case):
    """Edge-by-node matrix with +1 at the sending and -1 at the receiving end."""
    E = case.n_edges
    rows = np.repeat(np.arange(E), 2)
    cols = np.column_stack([case.from_node, case.to_node]).ravel()
    vals = np.tile([1.0, -1.0], E)
    return sp.csr_matrix((vals, (rows, cols)), shape=(E, case.n_nodes))


def laplacian(case):
    M = incidence(case)
    return (M.T @ sp.diags(case.beta) @ M).tocsr()


def flows(case, theta):
    return case.beta * (incidence(case) @ theta)


@dataclass(frozen=True, eq=False)
class AllocationProgram:
    program: ConvexProgram
    case: NetworkCase
    supply_nodes: np.ndarray
    reference: int = 0

    @property
    def n_supply(self):
        return self.supply_nodes.shape[0]

    @property
    def supply_vars(self):
        return np.arange(self.n_supply)

    @property
    def theta_vars(self):
        return self.n_supply + np.arange(self.case.n_nodes)

    def supplies(self, z):
        return np.asarray(z)[..., : self.n_supply]

    def identity_query(self, supply_positions):
        """Identity query over supplies given by their position among supplies."""
        return QuerySpec.identity(supply_positions)

    def sum_query(self, groups):
        return QuerySpec.sum(groups)


def build_program(case, reference=0):
    N = case.n_nodes
    sup = case.supply_nodes
    ns = sup.shape[0]
    n = ns + N
    C = sp.csr_matrix((np.ones(ns), (sup, np.arange(ns))), shape=(N, ns))
    B = laplacian(case)
    G = sp.vstack(
        [
            sp.hstack([C, -B]),
            sp.csr_matrix(([1.0], ([0], [ns + reference])), shape=(1, n)),
        ],
        format="csr",
    )
    d = np.concatenate([case.demand, [0.0]])

    rows = []
    rhs = []
    eye = sp.identity(ns, format="csr")
    zero_t = sp.csr_matrix((ns, N))
    rows.append(sp.hstack([eye, zero_t]))
    rhs.append(case.p_max[sup])
    rows.append(sp.hstack([-eye, zero_t]))
    rhs.append(-case.p_min[sup])
    Fl = sp.diags(case.beta) @ incidence(case)
    up = np.isfinite(case.f_max)
    dn = np.isfinite(case.f_min)
    if up.any():
        rows.append(sp.hstack([sp.csr_matrix((up.sum(), ns)), Fl[up]]))
        rhs.append(case.f_max[up])
    if dn.any():
        rows.append(sp.hstack([sp.csr_matrix((dn.sum(), ns)), -Fl[dn]]))
        rhs.append(-case.f_min[dn])
    A = sp.vstack(rows, format="csr")
    b = np.concatenate(rhs)
    c1 = np.concatenate([case.c1[sup], np.zeros(N)])
    c2 = np.concatenate([case.c2[sup], np.zeros(N)])
    return AllocationProgram(ConvexProgram(c1, c2, A, b, G, d), case, sup, reference)


def random_instance(case, seed):
    """Fresh costs and demands on the case topology (per node, seeded)."""
    rng = np.random.default_rng(seed)
    N = case.n_nodes
    c1 = rng.uniform(1.0, 3.0, N)
    c2 = rng.uniform(0.1, 0.3, N)
    d = rng.uniform(0.5, 1.0, N)
    return case.with_values(c1=c1.tolist(), c2=c2.tolist(), demand=d.tolist())


@dataclass
class ProbeResult:
    max_change: float
    changes: np.ndarray
    nodes: np.ndarray
    signs: np.ndarray
    exceedances: list
    skipped: int = 0

    def histogram(self, bins=10):
        return np.histogram(self.changes, bins=bins)


PROBE_TOL = ToleranceSpec(feas=1e-10, gap=1e-12)


def sensitivity_probe(case, alpha, trials=100, seed=0, tol_excess=1e-6, backend="builtin", tol=PROBE_TOL):
    """Re-solve after moving one demand by +/- alpha and record the supply change.

    The default tolerances are tighter than usual: the quadratic cost is
    lifted into cones, where the minimiser is only accurate to about the
    square root of the gap, and the audit compares changes at the 1e-6 level.
    """
    alloc = build_program(case)
    prog = alloc.program
    z0, sol = solve_base(prog, tol=tol, backend=backend)
    if sol.status is not Status.OPTIMAL:
        raise SolverFailure(f"base solve ended with status {sol.status.value}", sol.status)
    p0 = alloc.supplies(z0)
    rng = np.random.default_rng(seed)
    changes, nodes, signs, exceed = [], [], [], []
    skipped = 0
    for _ in range(trials):
        i = int(rng.integers(case.n_nodes))
        first = 1.0 if rng.random() < 0.5 else -1.0
        for s in (first, -first):
            d = case.demand.copy()
            d[i] += s * alpha
            if d[i] < 0:
                continue
            z1, sol1 = solve_base(prog.with_rhs(np.concatenate([d, [0.0]])), tol=tol, backend=backend)
            if sol1.status is Status.OPTIMAL:
                break
        else:
            skipped += 1
            continue
        delta = float(np.abs(alloc.supplies(z1) - p0).sum())
        changes.append(delta)
        nodes.append(i)
        signs.append(s)
        if delta > alpha + tol_excess:
            exceed.append({"node": i, "sign": s, "change": delta})
            logger.warning("sensitivity audit: node %d moved supplies by %.6g > alpha=%g", i, delta, alpha)
    changes = np.asarray(changes)
    return ProbeResult(
        float(changes.max(initial=0.0)), changes, np.asarray(nodes), np.asarray(signs), exceed, skipped
    )
