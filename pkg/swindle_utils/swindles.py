"""Variance-reduced estimators built from coupled traces.

Functionals are evaluated in parameter space: latent chain states are pushed
through the transport map first, so ``E_Q[f]`` is always the expectation under
the fitted Gaussian Q = N(b, A A^T).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional

import numpy as np
from pydantic import BaseModel
from scipy.linalg import solve
from scipy.special import expit

from swindle_utils.core_rng import philox_generator
from swindle_utils.errors import ConfigError, ContractViolationError, InsufficientDataError
from swindle_utils.preconditioner import TransportMap
from swindle_utils.samplers import ChainTrace, CoupledTraces
from swindle_utils.targets import GaussianDensity

logger = logging.getLogger(__name__)

__all__ = [
    "FunctionKind",
    "EstimatorKind",
    "FunctionOfState",
    "SurrogateExpectation",
    "ControlVariateFit",
    "AntitheticAverage",
    "SwindleEstimate",
    "SwindleEstimateDocument",
    "mean_function",
    "variance_function",
    "predictive_function",
    "evaluate_trace",
    "estimate_beta",
    "surrogate_expectation",
    "control_variate_chain",
    "antithetic_average",
    "plain_estimate",
    "control_estimate",
    "antithetic_estimate",
    "cva_estimate",
    "columnwise_correlation",
    "fit_for_traces",
]

MIN_SURROGATE_BUDGET = 1000
RIDGE_FACTOR = 1e-8
_MC_CHUNK = 10_000


class FunctionKind(str, Enum):
    MEAN = "mean"
    VARIANCE = "variance"
    PREDICTIVE = "predictive"


class EstimatorKind(str, Enum):
    PLAIN = "plain"
    CONTROL = "control"
    ANTITHETIC = "antithetic"
    CVA = "cva"


@dataclass(frozen=True)
class FunctionOfState:
    """``f: R^D -> R^K`` applied row-wise to parameter-space states."""

    name: str
    kind: FunctionKind
    fn: Callable[[np.ndarray], np.ndarray]
    num_outputs: int
    center: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.num_outputs < 1:
            raise ContractViolationError(f"functional {self.name!r} must have at least one output")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fn(np.asarray(x, dtype=np.float64))

    @property
    def is_even_about_center(self) -> bool:
        return self.kind is FunctionKind.VARIANCE


def mean_function(dim: int) -> FunctionOfState:
    return FunctionOfState("mean", FunctionKind.MEAN, lambda x: x, dim)


def variance_function(center: np.ndarray) -> FunctionOfState:
    """Coordinate-wise ``(x - c)^2``; even about ``c``."""
    c = np.asarray(center, dtype=np.float64)
    return FunctionOfState("variance", FunctionKind.VARIANCE, lambda x: (x - c) ** 2, c.size, center=c)


def predictive_function(
    rows: np.ndarray,
    weights: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> FunctionOfState:
    """``sigmoid(x_*^T w)`` for every test row ``x_*``.

    ``weights`` maps a state to the regression weights (identity for plain
    logistic regression, ``effective_weights`` for the sparse model).
    """
    rows = np.asarray(rows, dtype=np.float64)
    to_weights = weights or (lambda x: x)
    return FunctionOfState(
        "predictive",
        FunctionKind.PREDICTIVE,
        lambda x: expit(to_weights(x) @ rows.T),
        rows.shape[0],
    )


def evaluate_trace(
    f: FunctionOfState,
    trace: ChainTrace,
    transport_map: Optional[TransportMap] = None,
) -> np.ndarray:
    """``f`` on the post-burn-in samples of ``trace``, shape ``(n_kept, B, K)``."""
    z = trace.kept()
    x = transport_map.forward(z) if transport_map is not None else z
    n, b, d = x.shape
    return f(x.reshape(n * b, d)).reshape(n, b, f.num_outputs)


def _flat(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return values[:, None]
    return values.reshape(-1, values.shape[-1])


def columnwise_correlation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlation per column; NaN where a column has zero variance."""
    a = _flat(a)
    b = _flat(b)
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    denom = np.sqrt(np.sum(ac * ac, axis=0) * np.sum(bc * bc, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.sum(ac * bc, axis=0) / denom
    return np.where(denom > 0.0, np.clip(rho, -1.0, 1.0), np.nan)


@dataclass
class SurrogateExpectation:
    mean: np.ndarray
    stderr: np.ndarray
    exact: bool
    budget: int = 0


def surrogate_expectation(
    surrogate: GaussianDensity,
    transport_map: TransportMap,
    f: FunctionOfState,
    budget: int,
    seed: int = 0,
) -> SurrogateExpectation:
    """``E_Q[f]`` for Q the pushforward of ``surrogate`` through the map.

    Closed form for the mean and centered-square functionals; otherwise i.i.d.
    Monte Carlo over ``budget`` exact draws from Q.
    """
    if budget < MIN_SURROGATE_BUDGET:
        raise ContractViolationError(
            f"surrogate expectation budget must be >= {MIN_SURROGATE_BUDGET}, got {budget}"
        )
    q = transport_map.pushforward(surrogate)
    if f.kind is FunctionKind.MEAN:
        return SurrogateExpectation(q.mean.copy(), np.zeros(q.dim), exact=True)
    if f.kind is FunctionKind.VARIANCE:
        offset = q.mean - f.center
        return SurrogateExpectation(np.diag(q.covariance) + offset * offset, np.zeros(q.dim), exact=True)

    rng = philox_generator(seed, sub_stream=4)
    total = np.zeros(f.num_outputs)
    total_sq = np.zeros(f.num_outputs)
    remaining = budget
    while remaining > 0:
        size = min(remaining, _MC_CHUNK)
        values = f(q.sample(size, rng))
        total += values.sum(axis=0)
        total_sq += np.sum(values * values, axis=0)
        remaining -= size
    mean = total / budget
    var = np.maximum(total_sq / budget - mean * mean, 0.0) * budget / (budget - 1)
    logger.debug("surrogate expectation of %s by Monte Carlo, budget %d", f.name, budget)
    return SurrogateExpectation(mean, np.sqrt(var / budget), exact=False, budget=budget)


@dataclass
class ControlVariateFit:
    """``beta[j]`` is the coefficient vector of output ``j`` over all surrogate features."""

    beta: np.ndarray
    surrogate_mean: np.ndarray
    surrogate_stderr: np.ndarray
    residual_variance: np.ndarray = field(default=None, repr=False)

    @property
    def num_outputs(self) -> int:
        return self.beta.shape[0]


def estimate_beta(
    fx: np.ndarray,
    fy: np.ndarray,
    expectation: Optional[SurrogateExpectation] = None,
    diagonal: bool = False,
) -> ControlVariateFit:
    """Least-squares regression of each ``f_j(X)`` on the centered ``f(Y)``.

    The Gram matrix is damped by ``1e-8 * trace / K`` so collinear surrogate
    features stay solvable. Without ``expectation`` the surrogate mean defaults
    to the sample mean of ``fy``, which only suits diagnostics.
    """
    fx = _flat(fx)
    fy = _flat(fy)
    if fx.shape != fy.shape:
        raise ContractViolationError(f"fx {fx.shape} and fy {fy.shape} shapes differ")
    n, k = fx.shape
    if n < k + 2:
        raise InsufficientDataError(f"regression needs at least {k + 2} rows for {k} features, got {n}")
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fy))):
        raise ContractViolationError("control-variate regression inputs must be finite")

    xc = fx - fx.mean(axis=0)
    yc = fy - fy.mean(axis=0)
    gram = yc.T @ yc / n
    cross = yc.T @ xc / n
    ridge = RIDGE_FACTOR * np.trace(gram) / k
    if ridge <= 0.0:
        ridge = RIDGE_FACTOR
    if diagonal:
        beta = np.diag(np.diag(cross) / (np.diag(gram) + ridge))
    else:
        beta = solve(gram + ridge * np.eye(k), cross, assume_a="pos").T

    residual = xc - yc @ beta.T
    if expectation is None:
        mean, stderr = fy.mean(axis=0), np.zeros(k)
    else:
        mean, stderr = expectation.mean, expectation.stderr
    return ControlVariateFit(
        beta=beta,
        surrogate_mean=np.asarray(mean, dtype=np.float64),
        surrogate_stderr=np.asarray(stderr, dtype=np.float64),
        residual_variance=residual.var(axis=0),
    )


def control_variate_chain(fx: np.ndarray, fy: np.ndarray, fit: ControlVariateFit) -> np.ndarray:
    """``Z = f(X) - (f(Y) - E_Q[f]) beta^T``, keeping the input shape."""
    fx = np.asarray(fx, dtype=np.float64)
    fy = np.asarray(fy, dtype=np.float64)
    if fx.shape != fy.shape:
        raise ContractViolationError(f"fx {fx.shape} and fy {fy.shape} shapes differ")
    if fx.shape[-1] != fit.num_outputs:
        raise ContractViolationError(
            f"fit has {fit.num_outputs} outputs but the chains have {fx.shape[-1]} components"
        )
    return fx - (fy - fit.surrogate_mean) @ fit.beta.T


@dataclass
class AntitheticAverage:
    average: np.ndarray
    covariance: np.ndarray
    correlation: np.ndarray


def antithetic_average(fxp: np.ndarray, fxm: np.ndarray) -> AntitheticAverage:
    fxp = np.asarray(fxp, dtype=np.float64)
    fxm = np.asarray(fxm, dtype=np.float64)
    if fxp.shape != fxm.shape:
        raise ContractViolationError(f"antithetic chains differ in shape: {fxp.shape} vs {fxm.shape}")
    a, b = _flat(fxp), _flat(fxm)
    cov = np.mean((a - a.mean(axis=0)) * (b - b.mean(axis=0)), axis=0)
    return AntitheticAverage(0.5 * (fxp + fxm), cov, columnwise_correlation(a, b))


class SwindleEstimateDocument(BaseModel):
    function: str
    kind: EstimatorKind
    estimates: List[float]
    rho: Optional[List[Optional[float]]] = None
    vr_factor: List[Optional[float]]
    ess: Optional[List[float]] = None
    grads_used: int


def _finite_or_none(values: np.ndarray) -> List[Optional[float]]:
    return [float(v) if np.isfinite(v) else None for v in np.asarray(values, dtype=np.float64)]


@dataclass
class SwindleEstimate:
    """Point estimates and the chain ``(n_kept, B, K)`` they average."""

    kind: EstimatorKind
    function: str
    chain: np.ndarray = field(repr=False)
    rho: Optional[np.ndarray]
    vr_factor: np.ndarray
    grads_used: int
    ess: Optional[np.ndarray] = None

    @property
    def estimates(self) -> np.ndarray:
        return self.chain.reshape(-1, self.chain.shape[-1]).mean(axis=0)

    def to_document(self) -> SwindleEstimateDocument:
        return SwindleEstimateDocument(
            function=self.function,
            kind=self.kind,
            estimates=[float(v) for v in self.estimates],
            rho=None if self.rho is None else _finite_or_none(self.rho),
            vr_factor=_finite_or_none(self.vr_factor),
            ess=None if self.ess is None else [float(v) for v in self.ess],
            grads_used=self.grads_used,
        )


def _variance_ratio(reference: np.ndarray, chain: np.ndarray) -> np.ndarray:
    ref = _flat(reference).var(axis=0)
    var = _flat(chain).var(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(var > 0.0, ref / var, np.inf)


def plain_estimate(
    traces: CoupledTraces,
    f: FunctionOfState,
    transport_map: Optional[TransportMap] = None,
) -> SwindleEstimate:
    fx = evaluate_trace(f, traces.primary, transport_map)
    return SwindleEstimate(
        kind=EstimatorKind.PLAIN,
        function=f.name,
        chain=fx,
        rho=None,
        vr_factor=np.ones(f.num_outputs),
        grads_used=traces.primary.cost_evals,
    )


def control_estimate(
    traces: CoupledTraces,
    f: FunctionOfState,
    fit: ControlVariateFit,
    transport_map: Optional[TransportMap] = None,
) -> SwindleEstimate:
    if traces.control is None:
        raise ConfigError("control estimate needs the control chain Y+")
    fx = evaluate_trace(f, traces.primary, transport_map)
    fy = evaluate_trace(f, traces.control, transport_map)
    z = control_variate_chain(fx, fy, fit)
    return SwindleEstimate(
        kind=EstimatorKind.CONTROL,
        function=f.name,
        chain=z,
        rho=columnwise_correlation(fx, fy @ fit.beta.T),
        vr_factor=_variance_ratio(fx, z),
        grads_used=traces.primary.cost_evals + traces.control.cost_evals,
    )


def antithetic_estimate(
    traces: CoupledTraces,
    f: FunctionOfState,
    transport_map: Optional[TransportMap] = None,
) -> SwindleEstimate:
    if traces.antithetic is None:
        raise ConfigError("antithetic estimate needs the antithetic chain X-")
    fxp = evaluate_trace(f, traces.primary, transport_map)
    fxm = evaluate_trace(f, traces.antithetic, transport_map)
    avg = antithetic_average(fxp, fxm)
    return SwindleEstimate(
        kind=EstimatorKind.ANTITHETIC,
        function=f.name,
        chain=avg.average,
        rho=avg.correlation,
        vr_factor=_variance_ratio(fxp, avg.average),
        grads_used=traces.primary.cost_evals + traces.antithetic.cost_evals,
    )


def cva_estimate(
    traces: CoupledTraces,
    f: FunctionOfState,
    fit: ControlVariateFit,
    transport_map: Optional[TransportMap] = None,
) -> SwindleEstimate:
    """``Z = (Z+ + Z-) / 2`` with ``Z+`` from (X+, Y+) and ``Z-`` from (X-, Y-).

    ``rho`` is the correlation between ``Z+`` and ``Z-``.
    """
    if not traces.has_all_chains:
        raise ConfigError("cva estimate needs X+, X-, Y+ and Y-")
    fxp = evaluate_trace(f, traces.primary, transport_map)
    fxm = evaluate_trace(f, traces.antithetic, transport_map)
    fyp = evaluate_trace(f, traces.control, transport_map)
    fym = evaluate_trace(f, traces.reflected, transport_map)
    z_plus = control_variate_chain(fxp, fyp, fit)
    z_minus = control_variate_chain(fxm, fym, fit)
    avg = antithetic_average(z_plus, z_minus)
    return SwindleEstimate(
        kind=EstimatorKind.CVA,
        function=f.name,
        chain=avg.average,
        rho=avg.correlation,
        vr_factor=_variance_ratio(fxp, avg.average),
        grads_used=(
            traces.primary.cost_evals + traces.antithetic.cost_evals + traces.control.cost_evals
        ),
    )


def fit_for_traces(
    traces: CoupledTraces,
    f: FunctionOfState,
    expectation: SurrogateExpectation,
    transport_map: Optional[TransportMap] = None,
    diagonal: bool = False,
) -> ControlVariateFit:
    """Estimate beta on the same post-burn-in samples it is applied to.

    With Y- available both (X+, Y+) and (X-, Y-) pairs enter the regression.
    """
    if traces.control is None:
        raise ConfigError("control-variate regression needs the control chain Y+")
    fx = _flat(evaluate_trace(f, traces.primary, transport_map))
    fy = _flat(evaluate_trace(f, traces.control, transport_map))
    if traces.has_all_chains:
        fx = np.concatenate([fx, _flat(evaluate_trace(f, traces.antithetic, transport_map))])
        fy = np.concatenate([fy, _flat(evaluate_trace(f, traces.reflected, transport_map))])
    return estimate_beta(fx, fy, expectation, diagonal=diagonal)
