import numpy as np
import pytest
import scipy.sparse as sp

from dpcc import fixture_path
from dpcc.network import build_program, load_case
from dpcc.problem import ConvexProgram

CASES = ("case3.m", "case5.m", "case14.m", "case57.m")


def two_var_toy(bound=0.8):
    """``z1 + z2 = 1``, ``z2 <= bound`` and loose boxes; cheapest with z2 large."""
    A = np.array([[0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]])
    b = np.array([bound, 10.0, 10.0, 10.0])
    return ConvexProgram([1.0, 0.0], [0.0, 0.0], A, b, [[1.0, 1.0]], [1.0])


def random_small_program(rng, n=3, m=4, quad=True):
    """Random strictly feasible program with one balance equality and box rows."""
    z0 = rng.uniform(0.2, 0.8, n)
    R = rng.normal(size=(m, n))
    A = np.vstack([R, np.eye(n), -np.eye(n)])
    b = np.concatenate([R @ z0 + rng.uniform(0.5, 1.5, m), np.full(n, 3.0), np.full(n, 3.0)])
    G = np.ones((1, n))
    d = np.array([z0.sum()])
    c1 = rng.uniform(-1, 1, n)
    c2 = rng.uniform(0.1, 1.0, n) if quad else np.zeros(n)
    return ConvexProgram(c1, c2, sp.csr_matrix(A), b, sp.csr_matrix(G), d)


@pytest.fixture(scope="session")
def case_paths():
    return {name.split(".")[0]: fixture_path(name) for name in CASES}


@pytest.fixture(scope="session")
def case3():
    return load_case(fixture_path("case3.m"))


@pytest.fixture(scope="session")
def alloc3(case3):
    return build_program(case3)


@pytest.fixture
def toy():
    return two_var_toy()
