import os
from pathlib import Path

import numpy as np
import pytest

from swindle_utils.targets import GaussianDensity, TargetDensity


def finite_difference_grad(target: TargetDensity, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``target.potential`` at a single point."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for d in range(x.size):
        step = np.zeros_like(x)
        step[d] = h
        grad[d] = (target.potential(x + step) - target.potential(x - step)) / (2.0 * h)
    return grad


def assert_gradient_matches(target: TargetDensity, points: np.ndarray, rtol: float = 1e-5) -> None:
    for x in points:
        analytic = target.grad_potential(x)
        numeric = finite_difference_grad(target, x)
        scale = max(np.linalg.norm(numeric), 1.0)
        assert np.linalg.norm(analytic - numeric) / scale < rtol


class FlatDensity(TargetDensity):
    """U == 0 on R^D."""

    def __init__(self, dim: int) -> None:
        self.dim = dim

    def _potential(self, x):
        return np.zeros(x.shape[:-1]) if x.ndim == 2 else 0.0

    def _grad(self, x):
        return np.zeros_like(x)


class InvertedQuartic(TargetDensity):
    """U(x) = -sum(x^4); leapfrog blows up from any large start."""

    def __init__(self, dim: int) -> None:
        self.dim = dim

    def _potential(self, x):
        return -np.sum(x ** 4, axis=-1)

    def _grad(self, x):
        return -4.0 * x ** 3


def diagonal_gaussian(scales, mean=None) -> GaussianDensity:
    scales = np.asarray(scales, dtype=np.float64)
    mean = np.zeros(scales.size) if mean is None else np.asarray(mean, dtype=np.float64)
    return GaussianDensity(mean, np.diag(scales))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def correlated_gaussian():
    mean = np.array([1.0, -0.5])
    scale_tril = np.array([[1.0, 0.0], [0.6, 0.8]])
    return GaussianDensity(mean, scale_tril)


@pytest.fixture(scope="session")
def german_credit_path():
    path = os.getenv("SWINDLES_GERMAN_CREDIT")
    if not path or not Path(path).exists():
        pytest.skip("SWINDLES_GERMAN_CREDIT does not point at the German credit file")
    return Path(path)
