import math

import numpy as np
import pytest

from dpcc.errors import InvalidPrivacy
from dpcc.noise import GAUSSIAN, LAPLACE, NoiseSpec, calibrate, covariance_sqrt, sample
from dpcc.problem import PrivacyParams


def test_laplace_scale():
    spec = calibrate(PrivacyParams(epsilon=1.0, alpha=0.1))
    assert spec.distribution == LAPLACE and spec.scale == pytest.approx(0.1)


def test_gaussian_scale():
    spec = calibrate(PrivacyParams(epsilon=0.5, delta=0.01, alpha=0.1), GAUSSIAN)
    assert spec.scale == pytest.approx(0.1 * math.sqrt(2 * math.log(125)) / 0.5)
    assert spec.scale == pytest.approx(0.6215, abs=1e-4)


def test_trace_nine_laplace():
    spec = calibrate(PrivacyParams(epsilon=1.0, alpha=0.5), dim=9)
    assert spec.covariance.sum() == pytest.approx(4.5)


@pytest.mark.parametrize(
    "privacy, dist",
    [
        (PrivacyParams(epsilon=0.0), LAPLACE),
        (PrivacyParams(epsilon=-1.0), LAPLACE),
        (PrivacyParams(delta=0.0), GAUSSIAN),
        (PrivacyParams(delta=1.0), GAUSSIAN),
        (PrivacyParams(delta=0.1), LAPLACE),
    ],
)
def test_invalid(privacy, dist):
    with pytest.raises(InvalidPrivacy):
        calibrate(privacy, dist)


def test_deterministic():
    spec = NoiseSpec(LAPLACE, 0.1, 4)
    np.testing.assert_array_equal(sample(spec, 7), sample(spec, 7))
    assert not np.array_equal(sample(spec, 7), sample(spec, 8))


def test_mask():
    spec = NoiseSpec(LAPLACE, 0.1, 3, zero_mask={1})
    xs = sample(spec, 0, size=1000)
    assert np.all(xs[:, 1] == 0.0)
    assert spec.covariance[1] == 0.0
    assert covariance_sqrt(spec)[1] == 0.0


def test_covariance_sqrt():
    np.testing.assert_allclose(covariance_sqrt(NoiseSpec(LAPLACE, 0.1, 2)), [math.sqrt(0.02)] * 2)
    np.testing.assert_allclose(covariance_sqrt(NoiseSpec(GAUSSIAN, 2.0, 2)), [2.0, 2.0])


def test_laplace_moments():
    xs = sample(NoiseSpec(LAPLACE, 0.1, 1), 123, size=10**6)[:, 0]
    se = math.sqrt(0.02 / xs.size)
    assert abs(xs.mean()) <= 4 * se
    assert xs.var() == pytest.approx(0.02, rel=0.02)


def test_empirical_covariance():
    spec = NoiseSpec(GAUSSIAN, 0.3, 3, zero_mask={2})
    xs = sample(spec, 9, size=10**6)
    emp = np.var(xs, axis=0)
    np.testing.assert_allclose(emp[:2], spec.covariance[:2], rtol=0.02)


def test_laplace_quantile_exact():
    # inverse-CDF sampling: the empirical CDF tracks the closed form
    lam = 0.5
    xs = np.sort(sample(NoiseSpec(LAPLACE, lam, 1), 4, size=200000)[:, 0])
    F = np.where(xs < 0, 0.5 * np.exp(xs / lam), 1 - 0.5 * np.exp(-xs / lam))
    ecdf = np.arange(1, xs.size + 1) / xs.size
    assert np.max(np.abs(F - ecdf)) < 1.63 / math.sqrt(xs.size) * 1.5


def test_scaled_and_restricted():
    spec = NoiseSpec(LAPLACE, 0.1, 5, zero_mask={0})
    assert spec.scaled(3).scale == pytest.approx(0.3)
    r = spec.restricted([1, 2])
    assert r.dim == 2 and not r.zero_mask
