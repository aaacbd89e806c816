"""ESS, split R-hat, coupling statistics and the acceptance-rate tuning curve."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import rankdata

from swindle_utils.errors import (
    ConfigError,
    ContractViolationError,
    InsufficientChainsError,
    InsufficientDataError,
    UndefinedEssError,
)
from swindle_utils.preconditioner import TransportMap
from swindle_utils.samplers import CouplingMode, CoupledTraces
from swindle_utils.swindles import FunctionOfState, columnwise_correlation, evaluate_trace

logger = logging.getLogger(__name__)

__all__ = [
    "EssReport",
    "CouplingStats",
    "TuningCurve",
    "ess",
    "ess_from_replications",
    "rhat",
    "coupling_stats",
    "predict_vr_ess",
    "tuning_curve",
    "efficiency_bound",
    "grid_cell_gap",
]

SUPER_EFFICIENCY_CAP = 10.0
MIN_ESS_LENGTH = 8
MIN_RHAT_LENGTH = 4
CONTRACTION_FLOOR = 1e-12


@dataclass
class EssReport:
    ess: np.ndarray
    ess_per_grad: Optional[np.ndarray]
    truncation_lags: np.ndarray
    num_draws: int


def _as_chains(chains: np.ndarray) -> np.ndarray:
    """Normalize to ``(M, n, K)``."""
    x = np.asarray(chains, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :, None]
    elif x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ContractViolationError(f"chains must have shape (M, n) or (M, n, K), got {np.shape(chains)}")
    return x


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row of ``x`` (shape ``(M, n)``) via FFT."""
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, n=size, axis=-1)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=-1)[..., :n]
    return acov / n


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    ranks = rankdata(x, method="average").reshape(m, n)
    return ndtri((ranks - 0.375) / (m * n + 0.25))


def _integrated_time(x: np.ndarray) -> Tuple[float, float, int]:
    """Return ``(tau, var_plus, lag)`` for one component of ``(M, n)`` chains.

    Per-chain autocovariances are pooled, then summed in pairs with Geyer's
    initial positive sequence made monotone.
    """
    m, n = x.shape
    acov = _autocovariance(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = float(np.mean(chain_var))
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += float(np.var(x.mean(axis=1), ddof=1))
    if var_plus <= 0.0:
        return np.nan, 0.0, 0
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    num_pairs = n // 2
    pairs = rho[: 2 * num_pairs].reshape(num_pairs, 2).sum(axis=1)
    positive = pairs > 0.0
    stop = num_pairs if positive.all() else int(np.argmin(positive))
    pairs = np.minimum.accumulate(pairs[: max(stop, 1)])
    tau = -1.0 + 2.0 * float(np.sum(pairs))
    return max(tau, 1.0 / np.log10(max(m * n, 10))), var_plus, 2 * max(stop, 1) - 1


def ess(
    chains: np.ndarray,
    reference_variance: Optional[np.ndarray] = None,
    grad_evals: Optional[int] = None,
    rank_normalize: bool = False,
) -> EssReport:
    """Effective sample size per component of ``(M, n[, K])`` chains.

    ``ESS = M n / tau`` with ``tau`` the integrated autocorrelation time. With
    ``reference_variance`` (e.g. the plain chain's variance when scoring a
    swindle chain) ``ESS = M n ref / (tau var_plus)``; a zero-variance chain is
    then reported at the cap ``10 M n`` instead of raising.
    """
    x = _as_chains(chains)
    m, n, k = x.shape
    if m < 1 or n < MIN_ESS_LENGTH:
        raise InsufficientDataError(f"ESS needs chains of length >= {MIN_ESS_LENGTH}, got {n}")
    if not np.all(np.isfinite(x)):
        raise ContractViolationError("ESS input contains non-finite values")
    ref = None if reference_variance is None else np.broadcast_to(
        np.asarray(reference_variance, dtype=np.float64), (k,)
    )
    draws = m * n
    cap = SUPER_EFFICIENCY_CAP * draws
    values = np.empty(k)
    lags = np.zeros(k, dtype=np.int64)
    for j in range(k):
        component = x[:, :, j]
        if rank_normalize:
            component = _rank_normalize(component)
        tau, var_plus, lag = _integrated_time(component)
        lags[j] = lag
        if var_plus <= 0.0:
            if ref is None:
                raise UndefinedEssError(f"component {j} is constant; ESS is undefined")
            values[j] = cap
            continue
        if ref is None:
            values[j] = draws / tau
        else:
            values[j] = draws * ref[j] / (tau * var_plus)
    values = np.minimum(values, cap)
    per_grad = None if not grad_evals else values / grad_evals
    return EssReport(ess=values, ess_per_grad=per_grad, truncation_lags=lags, num_draws=draws)


def ess_from_replications(
    estimates: np.ndarray, reference_variance: np.ndarray, num_draws: int
) -> np.ndarray:
    """``ESS = N Var_MC / Var_MCMC`` with the estimator variance taken across replications."""
    est = np.asarray(estimates, dtype=np.float64)
    if est.ndim == 1:
        est = est[:, None]
    if est.shape[0] < 2:
        raise InsufficientDataError("across-replication ESS needs at least two replications")
    var = est.var(axis=0, ddof=1)
    ref = np.broadcast_to(np.asarray(reference_variance, dtype=np.float64), var.shape)
    cap = SUPER_EFFICIENCY_CAP * num_draws
    with np.errstate(divide="ignore"):
        out = np.where(var > 0.0, ref / np.where(var > 0.0, var, 1.0), cap)
    return np.minimum(out, cap)


def rhat(chains: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction factor per component.

    Each chain is halved, then ``sqrt(V / W)`` with ``W`` the mean within-chain
    variance and ``V = W (n - 1) / n + B (M + 1) / (n M)``.
    """
    x = _as_chains(chains)
    m, n, k = x.shape
    if m < 2:
        raise InsufficientChainsError(f"R-hat needs at least two chains, got {m}")
    if n < MIN_RHAT_LENGTH:
        raise InsufficientDataError(f"R-hat needs chains of length >= {MIN_RHAT_LENGTH}, got {n}")
    half = n // 2
    split = np.concatenate([x[:, :half], x[:, n - half :]], axis=0)
    m, n = split.shape[:2]
    within = np.mean(np.var(split, axis=1), axis=0)
    means = split.mean(axis=1)
    between = n / (m - 1.0) * np.sum((means - means.mean(axis=0)) ** 2, axis=0)
    pooled = within * (n - 1.0) / n + between * (m + 1.0) / (n * m)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(pooled / within)
    return np.where(within > 0.0, out, np.where(between > 0.0, np.inf, 1.0))


@dataclass
class CouplingStats:
    rho: np.ndarray
    acceptance: float
    partner_acceptance: float
    decoupling_rate: float
    joint_rejection_rate: float
    contraction_rate: float

    @property
    def rejection_rate(self) -> float:
        return 1.0 - self.acceptance


def _contraction_rate(distance: np.ndarray) -> float:
    steps = np.arange(distance.size)
    keep = distance > CONTRACTION_FLOOR
    if np.count_nonzero(keep) < 2:
        return float("nan")
    slope, _ = np.polyfit(steps[keep], np.log(distance[keep]), 1)
    return float(np.exp(slope))


def coupling_stats(
    traces: CoupledTraces,
    f: FunctionOfState,
    transport_map: Optional[TransportMap] = None,
    same_target: Optional[bool] = None,
) -> CouplingStats:
    """Correlation, acceptance and decoupling between the primary chain and its partner.

    The contraction rate is fitted when both chains target the same density
    (antithetic pairs always do); otherwise it is NaN.
    """
    x = traces.primary
    y = traces.partner
    fx = evaluate_trace(f, x, transport_map)
    fy = evaluate_trace(f, y, transport_map)
    burn = x.burn_in
    acc_x = x.accepted[burn:]
    acc_y = y.accepted[burn:]

    antithetic = y is traces.antithetic
    if same_target is None:
        same_target = antithetic
    contraction = float("nan")
    if same_target:
        gap = x.samples + y.samples - 2.0 * traces.center if antithetic else x.samples - y.samples
        distance = np.linalg.norm(gap, axis=-1).mean(axis=1)
        contraction = _contraction_rate(distance)

    return CouplingStats(
        rho=columnwise_correlation(fx, fy),
        acceptance=float(acc_x.mean()),
        partner_acceptance=float(acc_y.mean()),
        decoupling_rate=float(np.mean(acc_x != acc_y)),
        joint_rejection_rate=float(np.mean(~acc_x & ~acc_y)),
        contraction_rate=contraction,
    )


def predict_vr_ess(ess_hmc: float, rho: float, kind: str) -> float:
    """``ESS / (1 - rho^2)`` (control) or ``2 ESS / (1 + rho)`` (antithetic); inf at the degenerate rho."""
    kind = str(getattr(kind, "value", kind))
    if kind == "control":
        denom = 1.0 - rho * rho
    elif kind == "antithetic":
        denom = (1.0 + rho) / 2.0
    else:
        raise ConfigError(f"unknown swindle kind {kind!r}; expected 'control' or 'antithetic'")
    if denom <= 0.0:
        return float("inf")
    return ess_hmc / denom


def efficiency_bound(acceptance: np.ndarray, bound: str = "cdf") -> np.ndarray:
    """Plain-HMC ESS per gradient up to a constant.

    ``cdf``: ``a Phi(1 - a/2)^0.5``; ``quantile``: ``a (Phi^-1(1 - a/2))^0.5``.
    """
    a = np.asarray(acceptance, dtype=np.float64)
    if bound == "cdf":
        return a * np.sqrt(ndtr(1.0 - a / 2.0))
    if bound == "quantile":
        return a * np.sqrt(ndtri(1.0 - a / 2.0))
    raise ConfigError(f"unknown tuning bound {bound!r}; expected 'cdf' or 'quantile'")


@dataclass
class TuningCurve:
    acceptance: np.ndarray
    efficiency: np.ndarray
    rho: np.ndarray
    constant: float
    recommended_acceptance: float
    bound: str


def tuning_curve(
    pilots: Sequence[Tuple[float, float]],
    kind: str = "control",
    bound: str = "cdf",
    grid_size: int = 99,
    acceptance_range: Optional[Tuple[float, float]] = None,
) -> TuningCurve:
    """Predicted swindle efficiency over acceptance probability from pilot ``(acceptance, rho)`` pairs.

    ``rho`` is interpolated linearly between pilots (held constant beyond
    them); the curve is normalized so its maximum is 1. ``acceptance_range``
    restricts the grid, e.g. to the span the pilots measured.
    """
    if len(pilots) < 3:
        raise InsufficientDataError(f"tuning curve needs at least 3 pilot runs, got {len(pilots)}")
    pts = np.asarray(pilots, dtype=np.float64)
    acc, rho = pts[:, 0], pts[:, 1]
    if np.any((acc <= 0.0) | (acc >= 1.0)):
        raise ContractViolationError("pilot acceptance probabilities must lie in (0, 1)")
    if np.unique(acc).size < 2:
        raise ContractViolationError("pilot runs must cover more than one acceptance probability")
    lo, hi = acceptance_range if acceptance_range is not None else (0.01, 0.99)
    if not 0.0 < lo < hi < 1.0:
        raise ContractViolationError(f"acceptance range ({lo}, {hi}) must be an interval inside (0, 1)")
    order = np.argsort(acc)
    grid = np.linspace(lo, hi, grid_size)
    rho_grid = np.clip(np.interp(grid, acc[order], rho[order]), -1.0 + 1e-9, 1.0 - 1e-9)
    gain = np.array([predict_vr_ess(1.0, r, kind) for r in rho_grid])
    raw = efficiency_bound(grid, bound) * gain
    constant = 1.0 / float(np.max(raw))
    efficiency = constant * raw
    best = float(grid[int(np.argmax(efficiency))])
    logger.debug("tuning curve (%s bound) recommends acceptance %.3f", bound, best)
    return TuningCurve(grid, efficiency, rho_grid, constant, best, bound)


def grid_cell_gap(acceptances: Sequence[float], predicted: float, empirical: float) -> int:
    """Number of sweep cells between the rows nearest to ``predicted`` and ``empirical``.

    Cells are the sweep rows ordered by measured acceptance.
    """
    ordered = np.sort(np.asarray(acceptances, dtype=np.float64))
    if ordered.size == 0:
        raise InsufficientDataError("sweep has no rows")
    i = int(np.argmin(np.abs(ordered - predicted)))
    j = int(np.argmin(np.abs(ordered - empirical)))
    return abs(i - j)
