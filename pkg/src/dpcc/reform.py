"""Deterministic conic reformulation of the affine-recourse program.

The recourse ``z(xi) = z_tilde + Z xi`` is optimised over ``(z_tilde, Z)``.
Variables are laid out as ``z_tilde`` (n entries) followed by ``vec(Z)``
row-major (n*p entries), then any auxiliaries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidProgram, NotImplementable, OutOfRange, PrivacyTooStrong, SolverFailure
from .noise import GAUSSIAN, LAPLACE, NoiseSpec, covariance_sqrt, sample
from .problem import build_query_constraints, check_implementable, recourse_equality_rows
from .solver import ProgramBuilder, Status, solve

logger = logging.getLogger(__name__)

ANALYTIC = "analytic"
SCENARIO = "scenario"
SYMMETRIC_UNIMODAL = "symmetric_unimodal"
NO_VARIANCE = "none"
COST_VARIANCE = "cost"
SOLUTION_VARIANCE = "solution"


@dataclass(frozen=True)
class FeasibilitySpec:
    eta: float = 0.025
    mode: str = ANALYTIC
    eta_bar: tuple | None = None
    beta: float = 0.01
    seed: int = 0
    distribution_class: str | None = None

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise OutOfRange(f"eta must lie in (0, 1), got {self.eta}")
        if self.mode not in (ANALYTIC, SCENARIO):
            raise OutOfRange(f"unknown reformulation mode {self.mode!r}")
        if self.mode == SCENARIO and not 0 < self.beta < 1:
            raise OutOfRange(f"beta must lie in (0, 1), got {self.beta}")

    def row_budgets(self, m):
        if self.eta_bar is None:
            return np.full(m, self.eta)
        eb = np.asarray(self.eta_bar, dtype=float)
        if eb.shape != (m,):
            raise OutOfRange(f"eta_bar needs one entry per inequality ({m}), got {eb.shape}")
        return eb


@dataclass(frozen=True)
class VarianceSpec:
    mode: str = NO_VARIANCE
    phi: float = 0.0

    def __post_init__(self):
        if self.mode not in (NO_VARIANCE, COST_VARIANCE, SOLUTION_VARIANCE):
            raise OutOfRange(f"unknown variance mode {self.mode!r}")
        if not 0 <= self.phi <= 1:
            raise OutOfRange(f"phi must lie in [0, 1], got {self.phi}")


@dataclass
class Layout:
    n: int
    p: int
    aux: dict = field(default_factory=dict)

    @property
    def zt(self):
        return np.arange(self.n)

    @property
    def Z(self):
        return self.n + np.arange(self.n * self.p).reshape(self.n, self.p)

    @property
    def size(self):
        return self.n * (1 + self.p)

    def extract(self, x):
        return x[: self.n].copy(), x[self.n : self.size].reshape(self.n, self.p).copy()

    def z_cols(self, M):
        """Place a matrix acting on ``vec(Z)`` at the Z columns."""
        M = sp.csr_matrix(M)
        return sp.hstack([sp.csr_matrix((M.shape[0], self.n)), M], format="csr")

    def zt_cols(self, M):
        M = sp.csr_matrix(M)
        return sp.hstack([M, sp.csr_matrix((M.shape[0], self.n * self.p))], format="csr")


@dataclass(frozen=True, eq=False)
class Recourse:
    z_tilde: np.ndarray
    Z: np.ndarray
    query: object
    noise: NoiseSpec
    feas: FeasibilitySpec
    var: VarianceSpec
    objective: float
    expected_cost: float
    metadata: dict = field(default_factory=dict, repr=False)

    def realize(self, xi):
        """``z_tilde + Z xi`` for one noise vector or a batch (rows)."""
        xi = np.asarray(xi, dtype=float)
        return self.z_tilde + xi @ self.Z.T

    def full_Z(self):
        """Recourse matrix with one column per variable (identity queries)."""
        if self.query.kind != "identity":
            return self.Z
        n = self.z_tilde.shape[0]
        out = np.zeros((n, n))
        out[:, list(self.query.released)] = self.Z
        return out

    def trace_metric(self):
        """``Tr[Z' Sigma Z]`` read as ``sum_jk Z_jk^2 Sigma_kk``."""
        return float(np.sum(self.Z**2 * self.noise.covariance[None, :]))


class ExpectedObjective:
    """``E[c1'z + z'diag(c2)z]`` under zero-mean noise with diagonal covariance.

    Equals ``c1'z_tilde + z_tilde'diag(c2)z_tilde + Tr[Z'diag(c2)Z Sigma]``.
    """

    def __init__(self, c1, c2, cov, n, p):
        self.c1 = np.asarray(c1, dtype=float)
        self.c2 = np.asarray(c2, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.n, self.p = n, p
        if np.any(self.c2 < 0):
            raise InvalidProgram("quadratic cost must be nonnegative")

    def value(self, z_tilde, Z):
        Z = np.asarray(Z, dtype=float).reshape(self.n, self.p)
        trace = float(np.sum(self.c2[:, None] * Z**2 * self.cov[None, :]))
        return float(self.c1 @ z_tilde + self.c2 @ z_tilde**2) + trace

    def trace_term(self, Z):
        Z = np.asarray(Z, dtype=float).reshape(self.n, self.p)
        return float(np.sum(self.c2[:, None] * Z**2 * self.cov[None, :]))

    def add_to(self, builder, layout, weight=1.0):
        """Add ``weight`` times the expectation to the builder's objective."""
        builder.add_objective(layout.zt, weight * self.c1)
        cols = np.concatenate([layout.zt, layout.Z.ravel()])
        w = np.concatenate([self.c2, np.kron(self.c2, self.cov)])
        keep = w > 0
        if not np.any(keep):
            return None
        t = builder.add_weighted_squares(cols[keep], w[keep])
        builder.add_objective(t, np.full(t.shape[0], weight))
        return t


def expected_objective(c1, c2, cov, n, p):
    return ExpectedObjective(c1, c2, cov, n, p)


def safety_factor(distribution_class, eta_bar):
    eta_bar = float(eta_bar)
    if distribution_class == SYMMETRIC_UNIMODAL:
        if not 0 < eta_bar <= 1 / 6:
            raise OutOfRange(f"symmetric unimodal safety factor needs 0 < eta_bar <= 1/6, got {eta_bar}")
        return math.sqrt(2.0 / (9.0 * eta_bar))
    if distribution_class == GAUSSIAN:
        if not 0 < eta_bar < 1:
            raise OutOfRange(f"Gaussian safety factor needs 0 < eta_bar < 1, got {eta_bar}")
        from scipy.special import ndtri

        return float(ndtri(1.0 - eta_bar))
    raise OutOfRange(f"unknown distribution class {distribution_class!r}")


def distribution_class_for(noise):
    return GAUSSIAN if noise.distribution == GAUSSIAN else SYMMETRIC_UNIMODAL


def analytic_constraints(builder, layout, A, b, sigma_sqrt, eta_bar, distribution_class):
    """One cone per row: ``f_i ||diag(sigma) Z' A_i'|| <= b_i - A_i z_tilde``."""
    A = sp.csr_matrix(A)
    m, p = A.shape[0], layout.p
    f = np.array([safety_factor(distribution_class, e) for e in np.broadcast_to(eta_bar, (m,))])
    K = sp.kron(sp.diags(f) @ A, sp.diags(np.asarray(sigma_sqrt, float)), format="csr")
    builder.add_socs(layout.z_cols(K), np.zeros(m * p), -layout.zt_cols(A), b, [p + 1] * m)
    return f


def scenario_count(eta, beta, p):
    if not (0 < eta < 1 and 0 < beta < 1 and p >= 1):
        raise OutOfRange("scenario_count needs eta, beta in (0, 1) and p >= 1")
    e = math.e
    return math.ceil((1.0 / eta) * (e / (e - 1.0)) * (2 * p - 1 + math.log(1.0 / beta)))


def scenario_box(noise, eta, beta, seed):
    """Per-coordinate min/max over ``scenario_count`` seeded noise draws."""
    N = scenario_count(eta, beta, noise.dim)
    xs = sample(noise, seed, size=N)
    return xs.min(axis=0), xs.max(axis=0), N


def scenario_constraints(builder, layout, A, b, lo, hi):
    """Robust rows over the box ``[lo, hi]``.

    Row i reads ``A_i z_tilde + sum_k u_ik <= b_i`` with ``u_ik >= lo_k y_ik``
    and ``u_ik >= hi_k y_ik``, where ``y_i = A_i Z``.  This is the same
    feasible set as enforcing the row at every vertex of the box.
    """
    A = sp.csr_matrix(A)
    m, p = A.shape[0], layout.p
    u = builder.add_variables(m * p)
    layout.aux["scenario_u"] = u.reshape(m, p)
    for bound in (lo, hi):
        Y = layout.z_cols(sp.kron(A, sp.diags(np.asarray(bound, float)), format="csr"))
        U = sp.csr_matrix((np.ones(m * p), (np.arange(m * p), u)), shape=(m * p, builder.n))
        builder.add_le(sp.hstack([Y, sp.csr_matrix((m * p, builder.n - Y.shape[1]))]) - U, np.zeros(m * p))
    rowsum = sp.csr_matrix(
        (np.ones(m * p), (np.repeat(np.arange(m), p), u)),
        shape=(m, builder.n),
    )
    Zt = layout.zt_cols(A)
    builder.add_le(sp.hstack([Zt, sp.csr_matrix((m, builder.n - Zt.shape[1]))]) + rowsum, b)


def collapse_noise(query, noise, n):
    """Noise restricted to the query's answer coordinates."""
    p = query.p
    if noise.dim == p:
        return noise
    if query.kind == "identity" and noise.dim == n:
        return noise.restricted(query.released)
    raise OutOfRange(f"noise dimension {noise.dim} does not match the query ({p} answers)")


def assemble(prog, query, noise, feas, var=None):
    """Build the deterministic conic program; returns ``(ConicProgram, Layout)``."""
    var = var or VarianceSpec()
    n = prog.n
    query.validate(n)
    noise = collapse_noise(query, noise, n)
    p = query.p
    layout = Layout(n, p)
    builder = ProgramBuilder()
    builder.add_variables(layout.size)

    Q = build_query_constraints(query, n, p)
    builder.add_eq(layout.z_cols(Q.M), Q.rhs)
    builder.add_eq(layout.zt_cols(prog.G), prog.d)
    builder.add_eq(layout.z_cols(recourse_equality_rows(prog.G, p)), np.zeros(prog.l * p))

    sig = covariance_sqrt(noise)
    if feas.mode == ANALYTIC:
        cls = feas.distribution_class or distribution_class_for(noise)
        analytic_constraints(builder, layout, prog.A, prog.b, sig, feas.row_budgets(prog.m), cls)
    else:
        lo, hi, N = scenario_box(noise, feas.eta, feas.beta, feas.seed)
        layout.aux["box"] = (lo, hi, N)
        scenario_constraints(builder, layout, prog.A, prog.b, lo, hi)

    exp = ExpectedObjective(prog.c1, prog.c2, noise.covariance, n, p)
    phi = var.phi
    if var.mode == NO_VARIANCE:
        exp.add_to(builder, layout)
    elif var.mode == COST_VARIANCE:
        if np.any(prog.c2 != 0):
            raise InvalidProgram("the cost-variance objective needs a purely linear cost (c2 = 0)")
        builder.add_objective(layout.zt, (1.0 - phi) * prog.c1)
        # std of c1'Z xi: || diag(sigma) Z' c1 ||
        F = layout.z_cols(sp.kron(sp.csr_matrix(prog.c1.reshape(1, -1)), sp.diags(sig)))
        _add_norm_term(builder, layout, F, phi, "cost_std")
    else:
        exp.add_to(builder, layout, weight=1.0 - phi)
        F = layout.z_cols(sp.kron(sp.identity(n), sp.csr_matrix(sig.reshape(1, -1))))
        _add_norm_term(builder, layout, F, phi, "solution_std")
    return builder.build(), layout


def _add_norm_term(builder, layout, F, weight, name):
    s = builder.add_variables(1)[0]
    layout.aux[name] = s
    h = sp.csr_matrix(([1.0], ([0], [s])), shape=(1, builder.n))
    builder.add_soc(F, np.zeros(F.shape[0]), h, 0.0)
    builder.add_objective([s], [weight])


def _snap_query_rows(query, Z):
    """Project Z onto ``S Z = I`` to remove solver round-off on query rows."""
    Z = Z.copy()
    p = query.p
    if query.kind == "identity":
        Z[list(query.released), :] = np.eye(p)
        return Z
    for k, g in enumerate(query.groups):
        g = list(g)
        err = np.eye(p)[k] - Z[g, :].sum(axis=0)
        Z[g, :] += err / len(g)
    return Z


def solve_recourse(prog, query, noise, feas, var=None, tol=None, backend="builtin"):
    var = var or VarianceSpec()
    noise_c = collapse_noise(query, noise, prog.n)
    conic, layout = assemble(prog, query, noise_c, feas, var)
    sol = solve(conic, tol=tol, backend=backend)
    if sol.status is Status.INFEASIBLE:
        if not check_implementable(prog, query, tol=tol, backend=backend):
            raise NotImplementable("no recourse matrix satisfies the query set together with G Z = 0")
        raise PrivacyTooStrong(
            f"no recourse meets the violation budget eta={feas.eta} at noise scale {noise_c.scale:g}"
        )
    if sol.status is not Status.OPTIMAL:
        raise SolverFailure(f"recourse solve ended with status {sol.status.value}", sol.status)
    z_tilde, Z = layout.extract(sol.x)
    Z = _snap_query_rows(query, Z)
    exp = ExpectedObjective(prog.c1, prog.c2, noise_c.covariance, prog.n, query.p)
    meta = {"iterations": sol.iterations, "residuals": sol.residuals}
    if "box" in layout.aux:
        meta["box"] = layout.aux["box"]
    return Recourse(z_tilde, Z, query, noise_c, feas, var, sol.objective, exp.value(z_tilde, Z), meta)
