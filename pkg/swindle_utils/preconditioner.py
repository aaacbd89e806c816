"""Affine transport maps fitted by variational inference.

The map ``m(z) = A z + b`` (``A`` lower triangular with positive diagonal)
pushes N(0, I) onto the full-rank Gaussian Q = N(b, A A^T). Sampling the
preconditioned target in ``z`` space makes Q the standard normal with known
mean 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, PositiveFloat, PositiveInt
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize

from swindle_utils.core_rng import philox_generator
from swindle_utils.errors import ContractViolationError, VIDivergenceError
from swindle_utils.targets import GaussianDensity, TargetDensity, standard_normal

logger = logging.getLogger(__name__)

IMPROVEMENT_RTOL = 1e-8

__all__ = [
    "TransportMap",
    "VIConfig",
    "VIFitResult",
    "PreconditionedTarget",
    "TransportMapDocument",
    "fit_affine_vi",
    "run_affine_vi",
    "precondition",
    "identity_map",
    "smoothed_elbo",
]


@dataclass(frozen=True)
class TransportMap:
    scale_tril: np.ndarray
    shift: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.scale_tril, dtype=np.float64)
        b = np.asarray(self.shift, dtype=np.float64)
        if a.shape != (b.size, b.size):
            raise ContractViolationError(f"scale {a.shape} does not match shift of length {b.size}")
        if np.any(np.diag(a) <= 0.0):
            raise ContractViolationError("transport map scale must have a positive diagonal")
        object.__setattr__(self, "scale_tril", np.tril(a))
        object.__setattr__(self, "shift", b)

    @property
    def dim(self) -> int:
        return self.shift.size

    @property
    def log_det_jacobian(self) -> float:
        return float(np.sum(np.log(np.diag(self.scale_tril))))

    @property
    def covariance(self) -> np.ndarray:
        return self.scale_tril @ self.scale_tril.T

    def forward(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.scale_tril.T + self.shift

    def inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        centered = np.atleast_2d(x - self.shift)
        z = solve_triangular(self.scale_tril, centered.T, lower=True).T
        return z if x.ndim == 2 else z[0]

    def pushforward(self, surrogate: GaussianDensity) -> GaussianDensity:
        """The Gaussian obtained by pushing ``surrogate`` through the map."""
        mean = self.forward(surrogate.mean)
        return GaussianDensity(mean, self.scale_tril @ surrogate.scale_tril)

    def sample(self, num_samples: int, rng: np.random.Generator) -> np.ndarray:
        return self.forward(rng.standard_normal((num_samples, self.dim)))

    def to_document(self) -> "TransportMapDocument":
        rows = [float(v) for v in self.scale_tril[np.tril_indices(self.dim)]]
        return TransportMapDocument(
            dim=self.dim,
            scale_lower_triangular_row_major=rows,
            shift=[float(v) for v in self.shift],
        )

    @classmethod
    def from_document(cls, doc: "TransportMapDocument") -> "TransportMap":
        a = np.zeros((doc.dim, doc.dim))
        a[np.tril_indices(doc.dim)] = doc.scale_lower_triangular_row_major
        return cls(a, np.asarray(doc.shift, dtype=np.float64))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_document().to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TransportMap":
        text = Path(path).read_text(encoding="utf-8")
        return cls.from_document(TransportMapDocument.model_validate_json(text))


def identity_map(dim: int) -> TransportMap:
    return TransportMap(np.eye(dim), np.zeros(dim))


class TransportMapDocument(BaseModel):
    """``{dim, scale_lower_triangular_row_major, shift}``."""

    dim: PositiveInt
    scale_lower_triangular_row_major: List[float]
    shift: List[float]

    def to_json(self) -> str:
        # float repr is the shortest string that round-trips (at most 17 digits)
        return json.dumps(self.model_dump(), indent=2) + "\n"


class VIConfig(BaseModel):
    """Settings for the fixed-sample ELBO fit.

    The energy term is averaged over ``num_draws`` reparameterized draws that
    stay fixed for the whole fit, so the objective is deterministic and is
    minimized with L-BFGS-B. ``num_steps`` bounds the optimizer iterations.
    """

    num_steps: PositiveInt = 2000
    num_draws: PositiveInt = 64
    gtol: PositiveFloat = 1e-6
    ftol: PositiveFloat = 1e-10
    history: PositiveInt = 20
    seed: int = 0
    diagonal: bool = False


@dataclass
class VIFitResult:
    transport_map: TransportMap
    elbo_trace: np.ndarray
    smoothed_trace: np.ndarray = field(repr=False)

    @property
    def improved(self) -> bool:
        """Smoothed ELBO never drops by more than a relative 1e-8 between steps."""
        s = self.smoothed_trace
        if s.size < 2:
            return True
        tol = IMPROVEMENT_RTOL * (1.0 + np.abs(s[:-1]))
        return bool(np.all(np.diff(s) >= -tol))


def smoothed_elbo(trace: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing moving average of the ELBO trace (shorter windows at the start)."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size == 0:
        return trace
    csum = np.cumsum(np.insert(trace, 0, 0.0))
    idx = np.arange(1, trace.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def _unpack(params: np.ndarray, dim: int, rows: np.ndarray, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n_tril = rows.size
    a = np.zeros((dim, dim))
    a[rows, cols] = params[:n_tril]
    # diagonal is stored as log-scale
    diag = np.diag_indices(dim)
    a[diag] = np.exp(a[diag])
    return a, params[n_tril:]


def _fixed_draws(dim: int, cfg: VIConfig) -> np.ndarray:
    """Mirrored standard-normal draws whitened to sample mean 0 and covariance I."""
    half = max(-(-cfg.num_draws // 2), dim + 1)
    raw = philox_generator(cfg.seed).standard_normal((half, dim))
    eps = np.concatenate([raw, -raw])
    chol = cholesky(eps.T @ eps / eps.shape[0], lower=True)
    return solve_triangular(chol, eps.T, lower=True).T


def run_affine_vi(target: TargetDensity, cfg: VIConfig) -> VIFitResult:
    """Maximize the ELBO of N(b, A A^T) against ``target``.

    Parameters are the strictly-lower entries of ``A``, ``log diag(A)`` and ``b``,
    initialized at ``A = I``, ``b = 0``. The entropy term is analytic
    (``sum log A_dd`` plus a constant). On a Gaussian target the optimum over
    the whitened draws is exact: ``A = chol(Sigma)``, ``b = mu``.
    """
    dim = target.dim
    rows, cols = np.tril_indices(dim)
    if cfg.diagonal:
        keep = rows == cols
        rows, cols = rows[keep], cols[keep]
    is_diag = rows == cols
    eps = _fixed_draws(dim, cfg)
    entropy_const = 0.5 * dim * (1.0 + np.log(2.0 * np.pi))
    last: dict = {}

    def elbo_and_grad(params: np.ndarray) -> Tuple[float, np.ndarray]:
        a, b = _unpack(params, dim, rows, cols)
        with np.errstate(over="ignore", invalid="ignore"):
            u, g = target.potential_and_grad(eps @ a.T + b)
        elbo = float(-np.mean(u) + np.sum(params[: rows.size][is_diag]) + entropy_const)
        # d ELBO / d A_ij = -E[g_i eps_j]; diagonal via chain rule through exp
        grad_tril = (-(g.T @ eps) / eps.shape[0])[rows, cols]
        grad_tril[is_diag] = grad_tril[is_diag] * np.diag(a) + 1.0
        grad = np.concatenate([grad_tril, -np.mean(g, axis=0)])
        last.update(params=params.copy(), elbo=elbo)
        return elbo, grad

    def objective(params: np.ndarray) -> Tuple[float, np.ndarray]:
        elbo, grad = elbo_and_grad(params)
        if not np.isfinite(elbo) or not np.all(np.isfinite(grad)):
            return np.inf, np.zeros_like(params)
        return -elbo, -grad

    params = np.zeros(rows.size + dim)
    start, _ = elbo_and_grad(params)
    if not np.isfinite(start):
        raise VIDivergenceError(0, start)
    trace: List[float] = [start]

    def record(xk: np.ndarray) -> None:
        if not np.array_equal(xk, last.get("params")):
            elbo_and_grad(xk)
        trace.append(last["elbo"])
        if len(trace) % 500 == 0:
            logger.debug("vi step %d elbo %.4f", len(trace) - 1, last["elbo"])

    result = minimize(
        objective,
        params,
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={"maxiter": cfg.num_steps, "gtol": cfg.gtol, "ftol": cfg.ftol, "maxcor": cfg.history},
    )
    final = -float(result.fun)
    if not np.isfinite(final):
        raise VIDivergenceError(int(result.nit), final)
    if not result.success:
        logger.warning("affine VI stopped after %d steps: %s", result.nit, result.message)

    a, b = _unpack(result.x, dim, rows, cols)
    elbo_trace = np.asarray(trace)
    smoothed = smoothed_elbo(elbo_trace)
    logger.info(
        "affine VI finished: %d steps on %d draws, ELBO %.4f -> %.4f",
        result.nit,
        eps.shape[0],
        elbo_trace[0],
        final,
    )
    return VIFitResult(TransportMap(a, b), elbo_trace, smoothed)


def fit_affine_vi(target: TargetDensity, cfg: VIConfig) -> TransportMap:
    return run_affine_vi(target, cfg).transport_map


class PreconditionedTarget(TargetDensity):
    """The base target viewed in latent coordinates ``z = m^{-1}(x)``.

    ``U_latent(z) = U(m(z)) - log|det A|`` and ``grad U_latent(z) = A^T grad U(m(z))``.
    """

    def __init__(self, base: TargetDensity, transport_map: TransportMap) -> None:
        if base.dim != transport_map.dim:
            raise ContractViolationError(
                f"target dimension {base.dim} does not match map dimension {transport_map.dim}"
            )
        self.base = base
        self.transport_map = transport_map
        self.dim = base.dim
        self._log_det = transport_map.log_det_jacobian

    def to_parameter_space(self, z: np.ndarray) -> np.ndarray:
        return self.transport_map.forward(z)

    def surrogate(self) -> GaussianDensity:
        """Q in latent space: the standard normal, known mean 0."""
        return standard_normal(self.dim)

    def _potential(self, x: np.ndarray) -> np.ndarray:
        return self.base.potential(self.transport_map.forward(x)) - self._log_det

    def _grad(self, x: np.ndarray) -> np.ndarray:
        return self.base.grad_potential(self.transport_map.forward(x)) @ self.transport_map.scale_tril

    def _potential_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        u, g = self.base.potential_and_grad(self.transport_map.forward(x))
        return u - self._log_det, g @ self.transport_map.scale_tril


def precondition(target: TargetDensity, transport_map: TransportMap) -> PreconditionedTarget:
    return PreconditionedTarget(target, transport_map)


def load_or_none(path: Optional[Union[str, Path]]) -> Optional[TransportMap]:
    if path is None or not Path(path).exists():
        return None
    return TransportMap.load(path)
