"""Base convex programs, query definitions and implementability."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidProgram, InvalidQuery, SolverFailure
from .solver import ProgramBuilder, Status, lift_quadratic, make_program, solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ConvexProgram:
    """``min c1'z + z'diag(c2)z  s.t.  A z <= b,  G z = d``.

    ``d`` is the sensitive right-hand side and is kept out of ``repr``.
    """

    c1: np.ndarray
    c2: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    d: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "c1", np.asarray(self.c1, dtype=float))
        object.__setattr__(self, "c2", np.asarray(self.c2, dtype=float))
        object.__setattr__(self, "A", sp.csr_matrix(self.A, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).ravel())
        object.__setattr__(self, "G", sp.csr_matrix(self.G, dtype=float))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).ravel())

    @property
    def n(self):
        return self.c1.shape[0]

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def l(self):
        return self.G.shape[0]

    def cost(self, z):
        """Cost at one point (1-D) or at every row of a 2-D array."""
        z = np.asarray(z, dtype=float)
        return z @ self.c1 + (z * z) @ self.c2

    def with_rhs(self, d):
        return ConvexProgram(self.c1, self.c2, self.A, self.b, self.G, d)


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def valid(self):
        return not self.errors

    def __bool__(self):
        return self.valid

    def raise_if_invalid(self):
        if self.errors:
            raise InvalidProgram("; ".join(self.errors))


def validate_program(prog):
    rep = ValidationReport()
    n = prog.c1.shape[0] if prog.c1.ndim == 1 else -1
    if prog.c1.ndim != 1:
        rep.errors.append(f"dimension mismatch: c1 must be a vector, got shape {prog.c1.shape}")
    if prog.c2.ndim == 2:
        off = prog.c2 - np.diag(np.diag(prog.c2))
        if np.any(off != 0):
            rep.errors.append("non-diagonal quadratic cost: only diagonal c2 is supported")
        c2 = np.diag(prog.c2)
    else:
        c2 = prog.c2
    if c2.shape != (n,):
        rep.errors.append(f"dimension mismatch: c2 has shape {prog.c2.shape}, expected ({n},)")
    elif np.any(c2 < 0):
        bad = np.flatnonzero(c2 < 0).tolist()
        rep.errors.append(f"nonconvex: negative c2 entries at indices {bad}")
    if prog.A.shape[0] == 0:
        rep.errors.append("empty inequality block (m = 0)")
    if prog.G.shape[0] == 0:
        rep.errors.append("empty equality block (l = 0)")
    if prog.A.shape[1] != n:
        rep.errors.append(f"dimension mismatch: A has {prog.A.shape[1]} columns, expected {n}")
    if prog.b.shape[0] != prog.A.shape[0]:
        rep.errors.append(f"dimension mismatch: b has length {prog.b.shape[0]}, A has {prog.A.shape[0]} rows")
    if prog.G.shape[1] != n:
        rep.errors.append(f"dimension mismatch: G has {prog.G.shape[1]} columns, expected {n}")
    if prog.d.shape[0] != prog.G.shape[0]:
        rep.errors.append(f"dimension mismatch: d has length {prog.d.shape[0]}, G has {prog.G.shape[0]} rows")
    for name, arr in (("c1", prog.c1), ("c2", prog.c2), ("b", prog.b), ("d", prog.d)):
        if not np.all(np.isfinite(arr)):
            rep.errors.append(f"non-finite entries in {name}")
    if rep.valid and np.linalg.matrix_rank(prog.G.toarray()) < prog.G.shape[0]:
        rep.warnings.append("equality block is rank deficient")
    if rep.valid and np.all(c2 == 0):
        rep.warnings.append("purely linear cost: the optimum may not be unique")
    return rep


@dataclass(frozen=True)
class QuerySpec:
    """Identity query over ``released`` indices or sum query over ``groups``.

    Indices are 0-based.  The uniform view used throughout is a p x n 0/1
    matrix ``S`` whose rows select (identity) or add up (sum) coordinates.
    """

    kind: str
    released: tuple = ()
    groups: tuple = ()

    @classmethod
    def identity(cls, released):
        return cls("identity", released=tuple(int(i) for i in released))

    @classmethod
    def sum(cls, groups):
        return cls("sum", groups=tuple(tuple(int(i) for i in g) for g in groups))

    @property
    def p(self):
        return len(self.released) if self.kind == "identity" else len(self.groups)

    @property
    def rows(self):
        """Index sets, one per released answer."""
        if self.kind == "identity":
            return [(i,) for i in self.released]
        return [tuple(g) for g in self.groups]

    def validate(self, n):
        if self.kind == "identity":
            if not self.released:
                raise InvalidQuery("identity query needs a nonempty released set")
            if len(set(self.released)) != len(self.released):
                raise InvalidQuery("identity query lists an index twice")
        elif self.kind == "sum":
            if not self.groups:
                raise InvalidQuery("sum query needs at least one group")
            seen = set()
            for g in self.groups:
                if not g:
                    raise InvalidQuery("sum query contains an empty group")
                if len(set(g)) != len(g) or seen.intersection(g):
                    raise InvalidQuery(f"sum query groups intersect (group {list(g)})")
                seen.update(g)
        else:
            raise InvalidQuery(f"unknown query kind {self.kind!r}")
        bad = [i for g in self.rows for i in g if not 0 <= i < n]
        if bad:
            raise InvalidQuery(f"query indices out of range [0, {n}): {bad}")
        return self

    def matrix(self, n):
        rows, cols = [], []
        for k, g in enumerate(self.rows):
            rows += [k] * len(g)
            cols += list(g)
        return sp.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(self.p, n))


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float = 1.0
    delta: float = 0.0
    alpha: float = 0.1
    sensitivity: float | None = None

    @property
    def delta_alpha(self):
        """Sensitivity bound used for calibration (defaults to ``alpha``)."""
        return self.alpha if self.sensitivity is None else self.sensitivity


@dataclass(frozen=True)
class RecourseConstraintSet:
    """Linear equalities ``M vec(Z) = rhs`` with ``vec`` taken row-major."""

    n: int
    p: int
    M: sp.csr_matrix
    rhs: np.ndarray

    def residual(self, Z):
        Z = np.asarray(Z, dtype=float)
        return float(np.max(np.abs(self.M @ Z.ravel() - self.rhs), initial=0.0))

    def satisfied(self, Z, tol=1e-6):
        return self.residual(Z) <= tol

    def equations(self):
        """Human-readable ``(terms, rhs)`` pairs, terms as ``((row, col), coef)``."""
        out = []
        M = self.M.tocsr()
        for r in range(M.shape[0]):
            lo, hi = M.indptr[r], M.indptr[r + 1]
            terms = [((int(c) // self.p, int(c) % self.p), float(v)) for c, v in zip(M.indices[lo:hi], M.data[lo:hi])]
            out.append((terms, float(self.rhs[r])))
        return out


def build_query_constraints(query, n, p):
    """Equalities on Z encoding the query set.

    Identity queries accept ``p == n`` (columns indexed like the variables,
    noise zero off the released set) or ``p == len(released)`` (one column
    per released index).  Sum queries need ``p`` equal to the group count.
    """
    query.validate(n)
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    if query.kind == "identity" and p == n:
        for i in query.released:
            for j in range(n):
                rows.append(r)
                cols.append(i * p + j)
                vals.append(1.0)
                rhs.append(1.0 if i == j else 0.0)
                r += 1
    elif p == query.p:
        # S Z = I_p, covering both the collapsed identity form and sums
        for k_row, g in enumerate(query.rows):
            for k in range(p):
                for j in g:
                    rows.append(r)
                    cols.append(j * p + k)
                    vals.append(1.0)
                rhs.append(1.0 if k == k_row else 0.0)
                r += 1
    else:
        raise InvalidQuery(f"noise dimension {p} does not fit a {query.kind} query with {query.p} answers on n={n}")
    M = sp.csr_matrix((vals, (rows, cols)), shape=(r, n * p))
    return RecourseConstraintSet(n, p, M, np.asarray(rhs, dtype=float))


def recourse_equality_rows(G, p):
    """Matrix of ``vec(G Z)`` as a function of ``vec(Z)`` (row-major)."""
    return sp.kron(sp.csr_matrix(G), sp.identity(p), format="csr")


def check_implementable(prog, query, tol=None, backend="builtin"):
    """Whether some Z satisfies the query set together with ``G Z = 0``.

    Decided by the bounded LP ``min t s.t. -t <= Z <= t`` over those
    constraints; any optimal solution proves feasibility.
    """
    n = prog.n
    query.validate(n)
    p = query.p
    Q = build_query_constraints(query, n, p)
    b = ProgramBuilder()
    b.add_variables(n * p)
    t = b.add_variables(1)[0]
    b.add_eq(Q.M, Q.rhs)
    b.add_eq(recourse_equality_rows(prog.G, p), np.zeros(prog.l * p))
    eye = sp.identity(n * p, format="csr")
    tcol = sp.csr_matrix((np.ones(n * p), (np.arange(n * p), np.full(n * p, t))), shape=(n * p, t + 1))
    b.add_le(sp.hstack([eye, sp.csr_matrix((n * p, 1))]) - tcol, np.zeros(n * p))
    b.add_le(sp.hstack([-eye, sp.csr_matrix((n * p, 1))]) - tcol, np.zeros(n * p))
    b.add_objective([t], [1.0])
    sol = solve(b.build(), tol=tol, backend=backend)
    if sol.status is Status.OPTIMAL:
        return True
    if sol.status is Status.INFEASIBLE:
        return False
    raise SolverFailure(f"implementability check ended with status {sol.status.value}", sol.status)


def base_conic(prog, extra_eq=None):
    """Deterministic base program as a conic program (quadratic cost lifted)."""
    A_eq, b_eq = prog.G, prog.d
    if extra_eq is not None:
        M, rhs = extra_eq
        A_eq = sp.vstack([A_eq, sp.csr_matrix(M)], format="csr")
        b_eq = np.concatenate([b_eq, rhs])
    core = make_program(np.zeros(prog.n), A_eq=A_eq, b_eq=b_eq, A_in=prog.A, b_in=prog.b)
    return lift_quadratic(prog.c1, prog.c2, core)


def solve_base(prog, tol=None, backend="builtin", extra_eq=None):
    """Solve the deterministic program; returns ``(z, solution)``.

    The solver status is returned untouched so callers can tell an
    infeasible base program from a numerical failure.
    """
    sol = solve(base_conic(prog, extra_eq), tol=tol, backend=backend)
    z = sol.x[: prog.n] if sol.x is not None else None
    if sol.status is Status.OPTIMAL:
        sol.objective = float(prog.cost(z))
    return z, sol
