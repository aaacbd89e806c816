"""Un-normalized log-densities with analytic gradients.

Every target works on a single point of shape ``(D,)`` or on a batch of shape
``(B, D)``; potentials come back as a scalar or ``(B,)`` and gradients keep the
input shape.

Additive-constant conventions:

* ``GaussianDensity``: ``U(mean) == 0``.
* ``LogisticRegressionDensity``: the Gaussian prior's ``D/2 log(2 pi)``
  normalizer is dropped, so ``U(w) = |w|^2 / 2 - sum_n log Bern(y_n; sigmoid(x_n w))``.
* ``SparseLogisticRegressionDensity``: Gamma and Gaussian normalizers are
  dropped; the remaining terms are exact.
* ``ItemResponseDensity``: Gaussian normalizers are dropped.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.linalg import solve_triangular
from scipy.special import expit, log_expit

from swindle_utils.errors import ContractViolationError

__all__ = [
    "TargetDensity",
    "GaussianDensity",
    "LogisticRegressionDensity",
    "SparseLogisticRegressionDensity",
    "ItemResponseDensity",
    "potential",
    "grad_potential",
    "dimension",
    "standard_normal",
    "bernoulli_log_likelihood",
]

GAMMA_SHAPE = 0.5
GAMMA_RATE = 0.5
IRT_DELTA_PRIOR_MEAN = 0.75


class TargetDensity(ABC):
    """P(x) proportional to exp(-U(x)) on R^D."""

    dim: int
    known_mean: Optional[np.ndarray] = None

    @abstractmethod
    def _potential(self, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def _grad(self, x: np.ndarray) -> np.ndarray:
        ...

    def _potential_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self._potential(x), self._grad(x)

    def check_point(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.dim:
            raise ContractViolationError(
                f"{type(self).__name__} expects points of dimension {self.dim}, got shape {x.shape}"
            )
        return x

    def potential(self, x: np.ndarray) -> np.ndarray:
        return self._potential(self.check_point(x))

    def grad_potential(self, x: np.ndarray) -> np.ndarray:
        return self._grad(self.check_point(x))

    def potential_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self._potential_and_grad(self.check_point(x))

    @property
    def has_known_mean(self) -> bool:
        return self.known_mean is not None


def potential(t: TargetDensity, x: np.ndarray) -> np.ndarray:
    return t.potential(x)


def grad_potential(t: TargetDensity, x: np.ndarray) -> np.ndarray:
    return t.grad_potential(x)


def dimension(t: TargetDensity) -> int:
    return t.dim


def bernoulli_log_likelihood(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Elementwise ``log Bern(y; sigmoid(z))`` in the overflow-free log-sigmoid form."""
    return labels * log_expit(logits) + (1.0 - labels) * log_expit(-logits)


class GaussianDensity(TargetDensity):
    """N(mean, L L^T) with ``U(x) = |L^{-1}(x - mean)|^2 / 2``."""

    def __init__(self, mean: np.ndarray, scale_tril: np.ndarray) -> None:
        mean = np.asarray(mean, dtype=np.float64)
        scale_tril = np.asarray(scale_tril, dtype=np.float64)
        if scale_tril.shape != (mean.size, mean.size):
            raise ContractViolationError(
                f"scale factor shape {scale_tril.shape} does not match mean of length {mean.size}"
            )
        if not np.allclose(scale_tril, np.tril(scale_tril)):
            raise ContractViolationError("covariance factor must be lower triangular")
        if np.any(np.diag(scale_tril) <= 0.0):
            raise ContractViolationError("covariance factor must have a strictly positive diagonal")
        self.dim = mean.size
        self.mean = mean
        self.scale_tril = np.tril(scale_tril)
        self.known_mean = mean

    @property
    def covariance(self) -> np.ndarray:
        return self.scale_tril @ self.scale_tril.T

    def _whiten(self, x: np.ndarray) -> np.ndarray:
        centered = np.atleast_2d(x - self.mean)
        return solve_triangular(self.scale_tril, centered.T, lower=True).T

    def _potential(self, x: np.ndarray) -> np.ndarray:
        z = self._whiten(x)
        u = 0.5 * np.sum(z * z, axis=-1)
        return u if x.ndim == 2 else u[0]

    def _grad(self, x: np.ndarray) -> np.ndarray:
        z = self._whiten(x)
        g = solve_triangular(self.scale_tril, z.T, lower=True, trans="T").T
        return g if x.ndim == 2 else g[0]

    def sample(self, num_samples: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((num_samples, self.dim))
        return self.mean + eps @ self.scale_tril.T


def standard_normal(dim: int) -> GaussianDensity:
    return GaussianDensity(np.zeros(dim), np.eye(dim))


@dataclass
class LogisticRegressionDensity(TargetDensity):
    """Bayesian logistic regression, ``w_d ~ N(0, 1)``, ``y_n ~ Bern(sigmoid(x_n^T w))``.

    ``design`` already contains the bias column.
    """

    design: np.ndarray
    labels: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self) -> None:
        self.design = np.asarray(self.design, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.design.ndim != 2 or self.labels.shape != (self.design.shape[0],):
            raise ContractViolationError(
                f"design {self.design.shape} and labels {self.labels.shape} are inconsistent"
            )
        self.dim = self.design.shape[1]

    def logits(self, w: np.ndarray) -> np.ndarray:
        return w @ self.design.T

    def _potential(self, x: np.ndarray) -> np.ndarray:
        loglik = np.sum(bernoulli_log_likelihood(self.logits(x), self.labels), axis=-1)
        return 0.5 * np.sum(x * x, axis=-1) - loglik

    def _grad(self, x: np.ndarray) -> np.ndarray:
        residual = self.labels - expit(self.logits(x))
        return x - residual @ self.design

    def _potential_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        z = self.logits(x)
        u = 0.5 * np.sum(x * x, axis=-1) - np.sum(bernoulli_log_likelihood(z, self.labels), axis=-1)
        g = x - (self.labels - expit(z)) @ self.design
        return u, g

    def predictive_probability(self, w: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return expit(np.asarray(w) @ np.asarray(rows, dtype=np.float64).T)


@dataclass
class SparseLogisticRegressionDensity(TargetDensity):
    """Sparse hierarchical logistic regression in unconstrained coordinates.

    Layout of ``x``: ``[t, l_1..l_d, w_1..w_d]`` with ``tau = exp(t)``,
    ``lambda = exp(l)`` and effective weights ``tau * w * lambda``. The Gamma
    priors are shape/rate ``Gam(0.5, 0.5)``; the log-Jacobian ``t + sum(l)`` is
    folded into the potential.
    """

    design: np.ndarray
    labels: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self) -> None:
        self.design = np.asarray(self.design, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.design.ndim != 2 or self.labels.shape != (self.design.shape[0],):
            raise ContractViolationError(
                f"design {self.design.shape} and labels {self.labels.shape} are inconsistent"
            )
        self.num_covariates = self.design.shape[1]
        self.dim = 2 * self.num_covariates + 1

    def unpack(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = self.num_covariates
        return x[..., 0], x[..., 1 : 1 + d], x[..., 1 + d :]

    def constrained(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(tau, lambda, w)``; tau and lambda are always positive."""
        t, l, w = self.unpack(np.asarray(x, dtype=np.float64))
        return np.exp(t), np.exp(l), w

    def effective_weights(self, x: np.ndarray) -> np.ndarray:
        tau, lam, w = self.constrained(x)
        return tau[..., None] * w * lam

    @staticmethod
    def _gamma_log_prior_unconstrained(s: np.ndarray) -> np.ndarray:
        # log Gam(exp(s); a, b) + s, normalizer dropped
        return GAMMA_SHAPE * s - GAMMA_RATE * np.exp(s)

    def _potential_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        t, l, w = self.unpack(x)
        tau = np.exp(t)
        lam = np.exp(l)
        beta = tau[..., None] * w * lam
        z = beta @ self.design.T
        loglik = np.sum(bernoulli_log_likelihood(z, self.labels), axis=-1)
        u = (
            -self._gamma_log_prior_unconstrained(t)
            - np.sum(self._gamma_log_prior_unconstrained(l), axis=-1)
            + 0.5 * np.sum(w * w, axis=-1)
            - loglik
        )
        # dU/dbeta from the likelihood
        g_beta = -(self.labels - expit(z)) @ self.design
        chain = g_beta * beta
        g_t = GAMMA_RATE * tau - GAMMA_SHAPE + np.sum(chain, axis=-1)
        g_l = GAMMA_RATE * lam - GAMMA_SHAPE + chain
        g_w = w + g_beta * tau[..., None] * lam
        grad = np.concatenate([g_t[..., None], g_l, g_w], axis=-1)
        return u, grad

    def _potential(self, x: np.ndarray) -> np.ndarray:
        return self._potential_and_grad(x)[0]

    def _grad(self, x: np.ndarray) -> np.ndarray:
        return self._potential_and_grad(x)[1]


@dataclass
class ItemResponseDensity(TargetDensity):
    """1PL item-response model.

    Layout of ``x``: ``[alpha_1..alpha_S, beta_1..beta_J, delta]``; the logit of
    answer (i, j) is ``alpha_i - beta_j + delta``. Priors: ``alpha, beta ~ N(0, 1)``,
    ``delta ~ N(0.75, 1)``.
    """

    students: np.ndarray
    questions: np.ndarray
    correct: np.ndarray
    num_students: int
    num_questions: int
    dim: int = field(init=False)

    def __post_init__(self) -> None:
        self.students = np.asarray(self.students, dtype=np.int64)
        self.questions = np.asarray(self.questions, dtype=np.int64)
        self.correct = np.asarray(self.correct, dtype=np.float64)
        n = self.correct.size
        if self.students.shape != (n,) or self.questions.shape != (n,):
            raise ContractViolationError("answer triplet arrays must have equal length")
        self.dim = self.num_students + self.num_questions + 1
        rows = np.arange(n)
        ones = np.ones(n)
        self._student_incidence = sparse.csr_matrix(
            (ones, (rows, self.students)), shape=(n, self.num_students)
        )
        self._question_incidence = sparse.csr_matrix(
            (ones, (rows, self.questions)), shape=(n, self.num_questions)
        )

    def unpack(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        s, j = self.num_students, self.num_questions
        return x[..., :s], x[..., s : s + j], x[..., s + j]

    def logits(self, x: np.ndarray) -> np.ndarray:
        alpha, beta, delta = self.unpack(x)
        return alpha[..., self.students] - beta[..., self.questions] + delta[..., None]

    def _potential_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        batched = x.ndim == 2
        xb = np.atleast_2d(x)
        alpha, beta, delta = self.unpack(xb)
        z = self.logits(xb)
        loglik = np.sum(bernoulli_log_likelihood(z, self.correct), axis=-1)
        u = (
            0.5 * np.sum(alpha * alpha, axis=-1)
            + 0.5 * np.sum(beta * beta, axis=-1)
            + 0.5 * (delta - IRT_DELTA_PRIOR_MEAN) ** 2
            - loglik
        )
        residual = self.correct - expit(z)  # (B, T)
        g_alpha = alpha - (self._student_incidence.T @ residual.T).T
        g_beta = beta + (self._question_incidence.T @ residual.T).T
        g_delta = (delta - IRT_DELTA_PRIOR_MEAN) - np.sum(residual, axis=-1)
        grad = np.concatenate([g_alpha, g_beta, g_delta[:, None]], axis=-1)
        if batched:
            return u, grad
        return u[0], grad[0]

    def _potential(self, x: np.ndarray) -> np.ndarray:
        return self._potential_and_grad(x)[0]

    def _grad(self, x: np.ndarray) -> np.ndarray:
        return self._potential_and_grad(x)[1]
