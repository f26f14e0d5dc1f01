"""Private query release mechanisms and the output-perturbation baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import DegenerateBase, InvalidQuery, OutOfRange, SolverFailure
from .noise import LAPLACE, calibrate, sample
from .problem import QuerySpec, solve_base
from .reform import COST_VARIANCE, NO_VARIANCE, FeasibilitySpec, VarianceSpec, solve_recourse
from .solver import Status, make_program, solve

FEAS_TOL = 1e-6


@dataclass(eq=False)
class Release:
    kind: str
    values: np.ndarray
    xi: np.ndarray
    z_hat: np.ndarray | None
    feasible: bool
    iterations: int = 1
    provenance: dict = field(default_factory=dict)
    recourse: object = field(default=None, repr=False)

    def record(self):
        """Flat, serialisable summary."""
        out = {
            "kind": self.kind,
            "values": [float(v) for v in self.values],
            "feasible": bool(self.feasible),
            "iterations": int(self.iterations),
        }
        out.update(self.provenance)
        return out


def certify(prog, z_hat, tol=FEAS_TOL):
    """Inequality check ``A z_hat <= b + tol`` (uses only z_hat, A and b)."""
    z_hat = np.atleast_2d(z_hat)
    ok = np.all(z_hat @ prog.A.T.toarray() <= prog.b + tol, axis=1) if prog.m else np.ones(z_hat.shape[0], bool)
    return ok if ok.shape[0] > 1 else bool(ok[0])


def _noise_for(query, privacy, distribution, factor=1.0):
    spec = calibrate(privacy, distribution, dim=query.p)
    return spec.scaled(factor) if factor != 1.0 else spec


def _full_xi(query, xi, n):
    if query.kind != "identity":
        return xi
    out = np.zeros(n)
    out[list(query.released)] = xi
    return out


def _release_from(recourse, prog, query, xi, provenance, iterations=1):
    z_hat = recourse.realize(xi)
    S = query.matrix(prog.n)
    values = S @ z_hat
    return Release(
        query.kind,
        values,
        _full_xi(query, xi, prog.n),
        z_hat,
        certify(prog, z_hat),
        iterations,
        provenance,
        recourse,
    )


def _provenance(name, privacy, feas, var, seed, distribution, **extra):
    out = {
        "mechanism": name,
        "seed": seed if isinstance(seed, (int, type(None))) else str(seed),
        "epsilon": privacy.epsilon,
        "delta": privacy.delta,
        "alpha": privacy.alpha,
        "distribution": distribution,
    }
    if feas is not None:
        out.update({"eta": feas.eta, "reform": feas.mode})
    if var is not None:
        out.update({"variance": var.mode, "phi": var.phi})
    out.update(extra)
    return out


def release_query(
    prog,
    query,
    privacy,
    feas=None,
    var=None,
    seed=0,
    distribution=LAPLACE,
    recourse=None,
    tol=None,
    backend="builtin",
    name=None,
):
    """Solve for the recourse (unless given) and release one noisy answer."""
    feas = feas or FeasibilitySpec()
    var = var or VarianceSpec()
    query.validate(prog.n)
    if recourse is None:
        noise = _noise_for(query, privacy, distribution)
        recourse = solve_recourse(prog, query, noise, feas, var, tol=tol, backend=backend)
    xi = sample(recourse.noise, seed)
    name = name or ("piq" if query.kind == "identity" else "psq")
    prov = _provenance(name, privacy, feas, var, seed, distribution)
    return _release_from(recourse, prog, query, xi, prov)


def piq(prog, released, privacy, feas=None, var=None, seed=0, distribution=LAPLACE, **kw):
    """Private identity query over the variable indices ``released``."""
    return release_query(prog, QuerySpec.identity(released), privacy, feas, var, seed, distribution, **kw)


def psq(prog, groups, privacy, feas=None, var=None, seed=0, distribution=LAPLACE, **kw):
    """Private sum query over disjoint index groups."""
    return release_query(prog, QuerySpec.sum(groups), privacy, feas, var, seed, distribution, **kw)


def composition_steps(eta, mu):
    """Number of resampling rounds ``ceil(log mu / log eta)`` (at least 1)."""
    if not (0 < eta < 1 and 0 < mu < 1):
        raise OutOfRange("eta and mu must lie in (0, 1)")
    ratio = math.log(mu) / math.log(eta)
    return max(1, math.ceil(ratio - 1e-12))


def iterative(
    mechanism,
    prog,
    query,
    privacy,
    feas=None,
    mu=0.001,
    seed=0,
    var=None,
    distribution=LAPLACE,
    recourse=None,
    tol=None,
    backend="builtin",
):
    """Resample up to T times from one recourse computed at T-fold noise.

    ``mechanism`` is ``"piq"`` or ``"psq"``; it must match the query kind.
    """
    feas = feas or FeasibilitySpec()
    var = var or VarianceSpec()
    expected = {"piq": "identity", "psq": "sum"}.get(mechanism)
    if expected is None:
        raise InvalidQuery(f"unknown mechanism {mechanism!r}")
    if expected != query.kind:
        raise InvalidQuery(f"{mechanism} needs a {expected} query, got {query.kind}")
    query.validate(prog.n)
    T = composition_steps(feas.eta, mu)
    if recourse is None:
        noise = _noise_for(query, privacy, distribution, factor=T)
        recourse = solve_recourse(prog, query, noise, feas, var, tol=tol, backend=backend)
    # a single round draws exactly what the base mechanism would
    children = [seed] if T == 1 else np.random.SeedSequence(seed).spawn(T)
    prov = _provenance(f"{mechanism}-iterative", privacy, feas, var, seed, distribution, mu=mu, T=T)
    rel = None
    for t, child in enumerate(children, start=1):
        xi = sample(recourse.noise, child)
        rel = _release_from(recourse, prog, query, xi, prov, iterations=t)
        if rel.feasible:
            break
    return rel


@dataclass(eq=False)
class BaseAnswer:
    """Deterministic optimum of the base program and its query answer."""

    z: np.ndarray
    cost: float
    answer: np.ndarray
    S: object


def base_answer(prog, query, tol=None, backend="builtin"):
    query.validate(prog.n)
    z, sol = solve_base(prog, tol=tol, backend=backend)
    if sol.status is not Status.OPTIMAL:
        raise SolverFailure(f"base solve ended with status {sol.status.value}", sol.status)
    S = query.matrix(prog.n)
    return BaseAnswer(z, float(prog.cost(z)), S @ z, S)


def op_certificate(prog, S, released, tol=None, backend="builtin"):
    """Re-solve the base program with ``S z = released`` pinned.

    Returns ``(feasible, z)``; ``z`` is None when the pinned program is
    infeasible.
    """
    z, sol = solve_base(prog, tol=tol, backend=backend, extra_eq=(S, np.asarray(released, float)))
    if sol.status is Status.OPTIMAL:
        return True, z
    if sol.status is Status.INFEASIBLE:
        return False, None
    raise SolverFailure(f"output-perturbation certificate solve ended with status {sol.status.value}", sol.status)


def op_feasible(prog, S, released, tol=None, backend="highs"):
    """Whether some ``z`` with ``S z = released`` meets every constraint.

    A zero-objective linear program, much cheaper than the full re-solve.
    ``backend="highs"`` hands it to scipy's HiGHS; any conic backend name
    routes it through :func:`dpcc.solver.solve` instead.
    """
    S = sp.csr_matrix(S)
    A_eq = sp.vstack([prog.G, S], format="csr")
    b_eq = np.concatenate([prog.d, np.asarray(released, float)])
    if backend == "highs":
        res = linprog(
            np.zeros(prog.n), A_ub=sp.csr_matrix(prog.A), b_ub=prog.b, A_eq=A_eq, b_eq=b_eq,
            bounds=(None, None), method="highs",
        )
        if res.status == 0:
            return True
        if res.status == 2:
            return False
        raise SolverFailure(f"output-perturbation feasibility check failed: {res.message}", Status.NUMERICAL_FAILURE)
    lp = make_program(np.zeros(prog.n), A_eq=A_eq, b_eq=b_eq, A_in=prog.A, b_in=prog.b)
    sol = solve(lp, tol=tol, backend=backend)
    if sol.status is Status.OPTIMAL:
        return True
    if sol.status is Status.INFEASIBLE:
        return False
    raise SolverFailure(f"output-perturbation feasibility check ended with status {sol.status.value}", sol.status)


def output_perturbation(prog, query, privacy, seed=0, base=None, xi=None, tol=None, backend="builtin"):
    """Add Laplace noise directly to the deterministic query answer."""
    base = base or base_answer(prog, query, tol=tol, backend=backend)
    noise = calibrate(privacy, LAPLACE, dim=query.p)
    if xi is None:
        xi = sample(noise, seed)
    released = base.answer + xi
    ok, z = op_certificate(prog, base.S, released, tol=tol, backend=backend)
    prov = _provenance("op", privacy, None, None, seed, LAPLACE)
    return Release(query.kind, released, _full_xi(query, xi, prog.n), z, ok, 1, prov)


@dataclass
class FrontierRow:
    phi: float
    expected_loss: float
    loss_variance: float
    trace_metric: float
    expected_cost: float


def pareto_sweep(prog, query, privacy, feas=None, var_mode=COST_VARIANCE, phi_grid=None, seed=0, tol=None, backend="builtin"):
    """Solve for every ``phi`` and report loss, loss variance and ``Tr[Z' Sigma Z]``.

    The expected loss is ``100 (E[cost] - cost*) / |cost*|`` against the
    deterministic optimum.
    """
    if var_mode == NO_VARIANCE:
        raise OutOfRange("pareto sweep needs a variance-aware objective")
    feas = feas or FeasibilitySpec(seed=seed)
    phi_grid = sorted(np.linspace(0, 1, 11) if phi_grid is None else phi_grid)
    base = base_answer(prog, query, tol=tol, backend=backend)
    if abs(base.cost) < 1e-12:
        raise DegenerateBase("deterministic optimum has zero cost")
    noise = calibrate(privacy, LAPLACE, dim=query.p)
    rows = []
    for phi in phi_grid:
        rec = solve_recourse(prog, query, noise, feas, VarianceSpec(var_mode, float(phi)), tol=tol, backend=backend)
        cov = rec.noise.covariance
        # variance of the linear cost c1'(z_tilde + Z xi); exact when c2 = 0
        loss_var = float(np.sum((prog.c1 @ rec.Z) ** 2 * cov))
        loss = 100.0 * (rec.expected_cost - base.cost) / abs(base.cost)
        rows.append(FrontierRow(float(phi), loss, loss_var, rec.trace_metric(), rec.expected_cost))
    return rows

