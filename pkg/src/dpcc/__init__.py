"""Differentially private identity and sum queries on constrained programs.

Noise is added to the released answers and the rest of the solution adapts
through an affine recourse chosen so the perturbed point stays feasible with
a prescribed probability.
"""

from importlib import resources

from .errors import (
    ConnectivityError,
    DegenerateBase,
    DPCCError,
    InvalidPrivacy,
    InvalidProgram,
    InvalidQuery,
    NotImplementable,
    OutOfRange,
    ParseError,
    PrivacyTooStrong,
    SolverFailure,
)
from .mechanisms import Release, iterative, output_perturbation, pareto_sweep, piq, psq
from .network import NetworkCase, build_program, load_case, parse_case, random_instance, sensitivity_probe
from .noise import NoiseSpec, calibrate, sample
from .problem import ConvexProgram, PrivacyParams, QuerySpec, check_implementable, validate_program
from .reform import FeasibilitySpec, Recourse, VarianceSpec, solve_recourse
from .solver import ConicProgram, Solution, Status, ToleranceSpec, solve

__version__ = "0.1.0"


def fixture_path(name):
    """Path of a bundled case file, e.g. ``fixture_path("case14.m")``."""
    return str(resources.files(__package__) / "data" / name)


__all__ = [
    "ConicProgram",
    "ConnectivityError",
    "ConvexProgram",
    "DPCCError",
    "DegenerateBase",
    "FeasibilitySpec",
    "InvalidPrivacy",
    "InvalidProgram",
    "InvalidQuery",
    "NetworkCase",
    "NoiseSpec",
    "NotImplementable",
    "OutOfRange",
    "ParseError",
    "PrivacyParams",
    "PrivacyTooStrong",
    "QuerySpec",
    "Recourse",
    "Release",
    "Solution",
    "SolverFailure",
    "Status",
    "ToleranceSpec",
    "VarianceSpec",
    "build_program",
    "calibrate",
    "check_implementable",
    "fixture_path",
    "iterative",
    "load_case",
    "output_perturbation",
    "parse_case",
    "pareto_sweep",
    "piq",
    "psq",
    "random_instance",
    "sample",
    "sensitivity_probe",
    "solve",
    "solve_recourse",
    "validate_program",
]
