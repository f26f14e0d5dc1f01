"""Noise calibration and seeded sampling.

Sampling is an inverse-CDF transform of uniforms drawn from
``numpy.random.default_rng(seed)`` (PCG64).  The uniforms are taken on the
grid ``(k + 1/2) / 2**53`` so they never hit 0 or 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import InvalidPrivacy

LAPLACE = "laplace"
GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class NoiseSpec:
    distribution: str
    scale: float
    dim: int
    zero_mask: frozenset = frozenset()

    def __post_init__(self):
        if self.distribution not in (LAPLACE, GAUSSIAN):
            raise InvalidPrivacy(f"unknown noise distribution {self.distribution!r}")
        if not self.scale > 0:
            raise InvalidPrivacy(f"noise scale must be positive, got {self.scale}")
        object.__setattr__(self, "zero_mask", frozenset(int(i) for i in self.zero_mask))

    @property
    def variance(self):
        """Per-coordinate variance of an active coordinate."""
        return 2.0 * self.scale**2 if self.distribution == LAPLACE else self.scale**2

    @property
    def covariance(self):
        cov = np.full(self.dim, self.variance)
        if self.zero_mask:
            cov[sorted(self.zero_mask)] = 0.0
        return cov

    def scaled(self, factor):
        return NoiseSpec(self.distribution, self.scale * factor, self.dim, self.zero_mask)

    def restricted(self, keep):
        """Spec over the coordinates ``keep`` only (mask dropped)."""
        return NoiseSpec(self.distribution, self.scale, len(keep))


def calibrate(privacy, distribution=LAPLACE, dim=1, zero_mask=()):
    eps, delta = privacy.epsilon, privacy.delta
    if not eps > 0:
        raise InvalidPrivacy(f"epsilon must be positive, got {eps}")
    sens = privacy.delta_alpha
    if not sens > 0:
        raise InvalidPrivacy(f"sensitivity must be positive, got {sens}")
    if distribution == LAPLACE:
        if delta != 0:
            raise InvalidPrivacy("the Laplace mechanism is pure: delta must be 0")
        scale = sens / eps
    elif distribution == GAUSSIAN:
        if not 0 < delta < 1:
            raise InvalidPrivacy(f"the Gaussian mechanism needs 0 < delta < 1, got {delta}")
        scale = sens * math.sqrt(2.0 * math.log(1.25 / delta)) / eps
    else:
        raise InvalidPrivacy(f"unknown noise distribution {distribution!r}")
    return NoiseSpec(distribution, scale, int(dim), frozenset(zero_mask))


def _uniforms(rng, shape):
    k = rng.integers(0, 2**53, size=shape, dtype=np.int64)
    return (k + 0.5) / 2.0**53


def sample(spec, seed, size=None):
    """Draw one vector (``size=None``) or a ``(size, dim)`` array."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = (spec.dim,) if size is None else (size, spec.dim)
    u = _uniforms(rng, shape)
    if spec.distribution == LAPLACE:
        c = u - 0.5
        xi = -spec.scale * np.sign(c) * np.log1p(-2.0 * np.abs(c))
    else:
        xi = spec.scale * ndtri(u)
    if spec.zero_mask:
        xi[..., sorted(spec.zero_mask)] = 0.0
    return xi


def covariance_sqrt(spec):
    return np.sqrt(spec.covariance)
