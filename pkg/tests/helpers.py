"""Independent oracles shared by several test modules."""

import itertools

import numpy as np
import scipy.sparse as sp

from dpcc.problem import build_query_constraints, recourse_equality_rows
from dpcc.reform import ExpectedObjective, Layout
from dpcc.solver import ProgramBuilder, solve


def vertex_program(prog, query, noise, lo, hi, tol=None):
    """Chance rows written out at every one of the 2^p box vertices."""
    n, p = prog.n, query.p
    lay = Layout(n, p)
    b = ProgramBuilder()
    b.add_variables(lay.size)
    Q = build_query_constraints(query, n, p)
    b.add_eq(lay.z_cols(Q.M), Q.rhs)
    b.add_eq(lay.zt_cols(prog.G), prog.d)
    b.add_eq(lay.z_cols(recourse_equality_rows(prog.G, p)), np.zeros(prog.l * p))
    A = sp.csr_matrix(prog.A)
    for v in itertools.product(*zip(lo, hi)):
        # A (z_tilde + Z v) <= b
        Zv = sp.kron(A, sp.csr_matrix(np.asarray(v).reshape(1, -1)))
        b.add_le(sp.hstack([A, Zv], format="csr"), prog.b)
    ExpectedObjective(prog.c1, prog.c2, noise.covariance, n, p).add_to(b, lay)
    return solve(b.build(), tol=tol)
