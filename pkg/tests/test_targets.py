import numpy as np
import pytest
from scipy.special import expit

from conftest import assert_gradient_matches
from swindle_utils.data_io import synth_dataset
from swindle_utils.errors import ContractViolationError
from swindle_utils.targets import (
    GaussianDensity,
    ItemResponseDensity,
    LogisticRegressionDensity,
    SparseLogisticRegressionDensity,
    standard_normal,
)


@pytest.fixture(scope="module")
def logistic_target():
    ds = synth_dataset("logistic", seed=0).dataset
    return LogisticRegressionDensity(ds.design_matrix(), ds.labels)


@pytest.fixture(scope="module")
def sparse_target():
    ds = synth_dataset("sparse", seed=1).dataset
    return SparseLogisticRegressionDensity(ds.design_matrix(), ds.labels)


@pytest.fixture(scope="module")
def irt_target():
    ds = synth_dataset("irt", seed=2).dataset
    return ItemResponseDensity(ds.students, ds.questions, ds.correct, ds.num_students, ds.num_questions)


def test_gaussian_gradient_matches_finite_differences(correlated_gaussian, rng):
    assert_gradient_matches(correlated_gaussian, rng.standard_normal((100, 2)))


def test_logistic_gradient_matches_finite_differences(logistic_target, rng):
    assert_gradient_matches(logistic_target, rng.standard_normal((100, logistic_target.dim)))


def test_sparse_logistic_gradient_matches_finite_differences(sparse_target, rng):
    points = 0.3 * rng.standard_normal((100, sparse_target.dim))
    assert_gradient_matches(sparse_target, points)


def test_irt_gradient_matches_finite_differences(irt_target, rng):
    assert_gradient_matches(irt_target, rng.standard_normal((100, irt_target.dim)))


def test_gaussian_potential_vanishes_at_mean(correlated_gaussian):
    assert correlated_gaussian.potential(correlated_gaussian.mean) == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(correlated_gaussian.grad_potential(correlated_gaussian.mean), 0.0, atol=1e-14)


def test_gaussian_sample_moments(correlated_gaussian, rng):
    draws = correlated_gaussian.sample(200_000, rng)
    np.testing.assert_allclose(draws.mean(axis=0), correlated_gaussian.mean, atol=0.02)
    np.testing.assert_allclose(np.cov(draws.T), correlated_gaussian.covariance, atol=0.02)


def test_logistic_potential_at_origin_is_n_log_two(logistic_target):
    n = logistic_target.labels.size
    assert logistic_target.potential(np.zeros(logistic_target.dim)) == pytest.approx(n * np.log(2.0))


@pytest.mark.parametrize("name", ["logistic_target", "sparse_target", "irt_target"])
def test_batched_evaluation_matches_single_points(name, request, rng):
    target = request.getfixturevalue(name)
    points = 0.3 * rng.standard_normal((5, target.dim))
    u, g = target.potential_and_grad(points)
    assert u.shape == (5,)
    assert g.shape == (5, target.dim)
    for k in range(5):
        assert u[k] == pytest.approx(target.potential(points[k]), rel=1e-12)
        np.testing.assert_allclose(g[k], target.grad_potential(points[k]), rtol=1e-10, atol=1e-12)


def test_sparse_constrained_scales_are_positive(sparse_target, rng):
    tau, lam, w = sparse_target.constrained(5.0 * rng.standard_normal(sparse_target.dim))
    assert tau > 0.0
    assert np.all(lam > 0.0)
    assert w.shape == lam.shape
    assert sparse_target.dim == 2 * sparse_target.num_covariates + 1


def test_irt_layout(irt_target):
    assert irt_target.dim == irt_target.num_students + irt_target.num_questions + 1
    x = np.zeros(irt_target.dim)
    x[-1] = 0.75
    alpha, beta, delta = irt_target.unpack(x)
    assert alpha.size == irt_target.num_students
    assert beta.size == irt_target.num_questions
    assert delta == 0.75


def test_wrong_dimension_raises():
    target = standard_normal(3)
    with pytest.raises(ContractViolationError):
        target.potential(np.zeros(4))
    with pytest.raises(ContractViolationError):
        target.grad_potential(np.zeros((2, 2)))


def test_gaussian_rejects_invalid_factor():
    with pytest.raises(ContractViolationError):
        GaussianDensity(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ContractViolationError):
        GaussianDensity(np.zeros(2), np.diag([1.0, 0.0]))
    with pytest.raises(ContractViolationError):
        GaussianDensity(np.zeros(3), np.eye(2))


def test_logistic_potential_matches_brute_force_for_two_rows():
    design = np.array([[1.0, 0.5], [-0.3, 1.0]])
    labels = np.array([1.0, 0.0])
    target = LogisticRegressionDensity(design, labels)
    w = np.array([0.4, -0.7])
    expected = 0.5 * (w @ w)
    grad = w.copy()
    for x, y in zip(design, labels):
        p = expit(x @ w)
        expected -= y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
        grad -= (y - p) * x
    assert target.potential(w) == pytest.approx(expected, rel=1e-12)
    np.testing.assert_allclose(target.grad_potential(w), grad, rtol=1e-12)


def test_standard_gaussian_potential_by_hand():
    assert standard_normal(2).potential(np.array([3.0, 4.0])) == pytest.approx(12.5)


def test_gaussian_potential_differences_are_quadratic_forms(correlated_gaussian, rng):
    precision = np.linalg.inv(correlated_gaussian.covariance)
    x, y = rng.standard_normal((2, 2))
    dx, dy = x - correlated_gaussian.mean, y - correlated_gaussian.mean
    expected = 0.5 * dx @ precision @ dx - 0.5 * dy @ precision @ dy
    actual = correlated_gaussian.potential(x) - correlated_gaussian.potential(y)
    assert actual == pytest.approx(expected, rel=1e-10)


def test_dimensions_at_german_credit_and_irt_scale():
    credit = synth_dataset("logistic", seed=0, num_rows=1000, num_features=24).dataset
    assert LogisticRegressionDensity(credit.design_matrix(), credit.labels).dim == 25
    assert SparseLogisticRegressionDensity(credit.design_matrix(), credit.labels).dim == 51
    answers = synth_dataset("irt", seed=0, num_students=400, num_questions=100).dataset
    irt = ItemResponseDensity(answers.students, answers.questions, answers.correct, 400, 100)
    assert irt.dim == 501


def test_irt_logit_is_ability_minus_difficulty_plus_offset():
    target = ItemResponseDensity(np.array([0, 1, 1]), np.array([1, 0, 1]), np.array([1.0, 0.0, 1.0]), 2, 2)
    x = np.array([0.5, -1.0, 0.25, 2.0, 0.75])
    np.testing.assert_allclose(target.logits(x), [0.5 - 2.0 + 0.75, -1.0 - 0.25 + 0.75, -1.0 - 2.0 + 0.75])
