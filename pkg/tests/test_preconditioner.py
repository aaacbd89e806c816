import numpy as np
import pytest

from conftest import assert_gradient_matches
from swindle_utils.errors import ContractViolationError, VIDivergenceError
from swindle_utils.preconditioner import (
    PreconditionedTarget,
    TransportMap,
    VIConfig,
    VIFitResult,
    fit_affine_vi,
    identity_map,
    load_or_none,
    run_affine_vi,
    smoothed_elbo,
)
from swindle_utils.targets import GaussianDensity, TargetDensity, standard_normal


class NanDensity(TargetDensity):
    dim = 2

    def _potential(self, x):
        return np.full(x.shape[:-1], np.nan) if x.ndim == 2 else np.nan

    def _grad(self, x):
        return np.full_like(x, np.nan)


@pytest.fixture
def skewed_map():
    return TransportMap(np.array([[2.0, 0.0], [0.5, 0.5]]), np.array([1.0, -3.0]))


def test_forward_inverse(skewed_map, rng):
    z = rng.standard_normal((10, 2))
    np.testing.assert_allclose(skewed_map.inverse(skewed_map.forward(z)), z, atol=1e-12)
    assert skewed_map.log_det_jacobian == pytest.approx(np.log(2.0 * 0.5))


def test_pushforward_of_standard_normal(skewed_map):
    q = skewed_map.pushforward(standard_normal(2))
    np.testing.assert_allclose(q.mean, [1.0, -3.0])
    np.testing.assert_allclose(q.covariance, skewed_map.covariance)


def test_map_rejects_non_positive_diagonal():
    with pytest.raises(ContractViolationError):
        TransportMap(np.diag([1.0, -1.0]), np.zeros(2))


def test_document_round_trip(skewed_map, tmp_path):
    path = tmp_path / "map.json"
    skewed_map.save(path)
    loaded = TransportMap.load(path)
    np.testing.assert_array_equal(loaded.scale_tril, skewed_map.scale_tril)
    np.testing.assert_array_equal(loaded.shift, skewed_map.shift)
    assert load_or_none(tmp_path / "absent.json") is None
    assert load_or_none(None) is None


def test_preconditioned_potential_and_gradient(correlated_gaussian, skewed_map, rng):
    latent = PreconditionedTarget(correlated_gaussian, skewed_map)
    z = rng.standard_normal(2)
    expected = correlated_gaussian.potential(skewed_map.forward(z)) - skewed_map.log_det_jacobian
    assert latent.potential(z) == pytest.approx(expected)
    assert_gradient_matches(latent, rng.standard_normal((20, 2)))
    np.testing.assert_allclose(latent.to_parameter_space(np.zeros(2)), skewed_map.shift)


def test_exact_map_makes_latent_target_standard_normal(correlated_gaussian, rng):
    exact = TransportMap(correlated_gaussian.scale_tril, correlated_gaussian.mean)
    latent = PreconditionedTarget(correlated_gaussian, exact)
    z = rng.standard_normal((5, 2))
    np.testing.assert_allclose(latent.grad_potential(z), z, atol=1e-12)
    np.testing.assert_array_equal(latent.surrogate().mean, np.zeros(2))


def test_vi_recovers_gaussian_target():
    target = GaussianDensity(np.array([1.0, -2.0, 0.5]), np.array([[1.5, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.3, 0.5]]))
    result = run_affine_vi(target, VIConfig(num_steps=3000, seed=1))
    tmap = result.transport_map
    np.testing.assert_allclose(tmap.shift, target.mean, atol=1e-3)
    error = np.linalg.norm(tmap.covariance - target.covariance) / np.linalg.norm(target.covariance)
    assert error < 0.01
    assert result.improved
    assert 2 <= result.elbo_trace.size <= 3001


def test_vi_on_standard_normal_stays_at_identity():
    tmap = run_affine_vi(standard_normal(4), VIConfig(num_steps=500)).transport_map
    np.testing.assert_allclose(tmap.scale_tril, np.eye(4), atol=0.05)
    np.testing.assert_allclose(tmap.shift, np.zeros(4), atol=0.05)


def test_vi_elbo_trace_never_decreases(correlated_gaussian):
    trace = run_affine_vi(correlated_gaussian, VIConfig(num_steps=200)).elbo_trace
    assert np.all(np.diff(trace) >= -1e-10 * (1.0 + np.abs(trace[:-1])))


def test_improved_checks_every_smoothed_step():
    tmap = identity_map(1)
    rising = np.array([-5.0, -3.0, -2.0, -1.5])
    dip = np.array([-5.0, -1.0, -4.0, -0.5])
    assert VIFitResult(tmap, rising, rising).improved
    assert not VIFitResult(tmap, dip, dip).improved
    assert VIFitResult(tmap, np.array([-1.0]), np.array([-1.0])).improved
    flat = np.array([-2.0, -2.0 - 1e-12, -2.0])
    assert VIFitResult(tmap, flat, flat).improved


def test_vi_is_deterministic_for_a_seed(correlated_gaussian):
    cfg = VIConfig(num_steps=200, seed=3)
    a = run_affine_vi(correlated_gaussian, cfg)
    b = run_affine_vi(correlated_gaussian, cfg)
    np.testing.assert_array_equal(a.transport_map.scale_tril, b.transport_map.scale_tril)
    np.testing.assert_array_equal(a.elbo_trace, b.elbo_trace)


def test_diagonal_vi_keeps_scale_diagonal(correlated_gaussian):
    tmap = run_affine_vi(correlated_gaussian, VIConfig(num_steps=300, diagonal=True)).transport_map
    assert np.count_nonzero(np.tril(tmap.scale_tril, -1)) == 0


def test_vi_divergence_raises():
    with pytest.raises(VIDivergenceError) as info:
        run_affine_vi(NanDensity(), VIConfig(num_steps=10))
    assert info.value.step == 0


def test_smoothed_elbo_window():
    trace = np.arange(1.0, 6.0)
    np.testing.assert_allclose(smoothed_elbo(trace, window=2), [1.0, 1.5, 2.5, 3.5, 4.5])


def test_identity_map():
    tmap = identity_map(3)
    np.testing.assert_array_equal(tmap.forward(np.ones(3)), np.ones(3))
    assert tmap.log_det_jacobian == 0.0


def test_fit_affine_vi_returns_the_fitted_map(correlated_gaussian):
    cfg = VIConfig(num_steps=100, num_draws=16)
    tmap = fit_affine_vi(correlated_gaussian, cfg)
    np.testing.assert_array_equal(tmap.scale_tril, run_affine_vi(correlated_gaussian, cfg).transport_map.scale_tril)
    np.testing.assert_allclose(tmap.shift, correlated_gaussian.mean, atol=1e-3)
