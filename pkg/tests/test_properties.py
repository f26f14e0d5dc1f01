"""Property tests over randomly generated programs, queries and noise."""

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from dpcc.network import laplacian, random_instance
from dpcc.noise import GAUSSIAN, LAPLACE, NoiseSpec, calibrate, sample
from dpcc.problem import PrivacyParams, QuerySpec, build_query_constraints, solve_base
from dpcc.reform import FeasibilitySpec, scenario_count, solve_recourse
from dpcc.solver import Status

from conftest import random_small_program

SETTINGS = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
seeds = st.integers(0, 2**31 - 1)


@st.composite
def queries(draw, n=6):
    kind = draw(st.sampled_from(["identity", "sum"]))
    perm = draw(st.permutations(range(n)))
    k = draw(st.integers(1, n))
    chosen = list(perm[:k])
    if kind == "identity":
        return QuerySpec.identity(sorted(chosen))
    cuts = sorted(draw(st.sets(st.integers(1, k - 1), max_size=k - 1))) if k > 1 else []
    groups = [sorted(g) for g in np.split(np.array(chosen), cuts)]
    return QuerySpec.sum(groups)


@SETTINGS
@given(queries(), st.integers(1, 3))
def test_query_matrix_identity(query, extra):
    n = 6
    S = query.matrix(n)
    assert S.shape == (query.p, n)
    Q = build_query_constraints(query, n, query.p)
    # any Z meeting the query rows reproduces the identity
    Z = np.zeros((n, query.p))
    for j, g in enumerate(query.rows):
        Z[g[0], j] = 1.0
    vec = Z.ravel()
    np.testing.assert_allclose(Q.M @ vec, Q.rhs)
    np.testing.assert_allclose(S @ Z, np.eye(query.p))


@SETTINGS
@given(seeds)
def test_laplacian_properties(case3, seed):
    case = random_instance(case3, seed)
    L = laplacian(case).toarray()
    np.testing.assert_allclose(L, L.T)
    np.testing.assert_allclose(L.sum(axis=1), 0.0, atol=1e-12)
    assert np.linalg.eigvalsh(L).min() >= -1e-10


@SETTINGS
@given(seeds, st.sampled_from([LAPLACE, GAUSSIAN]), st.integers(1, 5))
def test_noise_deterministic(seed, dist, dim):
    spec = NoiseSpec(dist, 0.3, dim)
    a = sample(spec, seed, size=4)
    np.testing.assert_array_equal(a, sample(spec, seed, size=4))
    assert a.shape == (4, dim) and np.all(np.isfinite(a))


@SETTINGS
@given(st.floats(0.05, 5.0), st.floats(0.01, 1.0), st.floats(1e-8, 0.1))
def test_calibration_monotone(eps, alpha, delta):
    lap = calibrate(PrivacyParams(eps, 0.0, alpha))
    assert lap.scale == pytest.approx(alpha / eps)
    assert calibrate(PrivacyParams(2 * eps, 0.0, alpha)).scale < lap.scale
    g = calibrate(PrivacyParams(eps, delta, alpha), GAUSSIAN)
    assert g.scale == pytest.approx(alpha * math.sqrt(2 * math.log(1.25 / delta)) / eps)


@SETTINGS
@given(st.floats(0.001, 0.5), st.floats(0.001, 0.5), st.integers(1, 10))
def test_scenario_count_monotone(eta, beta, p):
    N = scenario_count(eta, beta, p)
    assert N >= scenario_count(eta, beta, max(p - 1, 1))
    assert N >= scenario_count(min(2 * eta, 0.99), beta, p)
    assert N >= (1 / eta) * (math.e / (math.e - 1)) * (2 * p - 1 + math.log(1 / beta))


@SETTINGS
@given(seeds)
def test_base_solution_feasible(seed):
    prog = random_small_program(np.random.default_rng(seed))
    z, sol = solve_base(prog)
    assert sol.status is Status.OPTIMAL
    assert np.abs(prog.G @ z - prog.d).max() <= 1e-6
    assert (prog.A @ z - prog.b).max() <= 1e-6


@SETTINGS
@given(seeds, st.integers(0, 2))
def test_recourse_invariants(seed, idx):
    rng = np.random.default_rng(seed)
    prog = random_small_program(rng)
    query = QuerySpec.identity([idx])
    noise = calibrate(PrivacyParams(1.0, 0.0, 0.05), dim=1)
    rec = solve_recourse(prog, query, noise, FeasibilitySpec(0.05))
    # recourse keeps the balance for every draw and reproduces the release exactly
    np.testing.assert_allclose(prog.G @ rec.Z, 0.0, atol=1e-6)
    assert rec.Z[idx, 0] == 1.0
    xi = sample(noise, seed, size=50)
    z = rec.realize(xi)
    np.testing.assert_array_equal(z[:, idx], rec.z_tilde[idx] + xi[:, 0])
    np.testing.assert_allclose(z @ np.asarray(prog.G.todense()).T, np.tile(prog.d, (50, 1)), atol=1e-6)
    assert rec.expected_cost >= float(prog.cost(solve_base(prog)[0])) - 1e-6
