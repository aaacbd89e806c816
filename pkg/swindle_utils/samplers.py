"""Transition kernels and coupled-chain drivers.

Kernels advance a batch of chains ``(B, D)`` in lockstep. Chain ``k`` of a run
seeded with ``seed`` reads the noise stream ``chain_seed(seed, k)``; coupled
partners read the same stream at the same step, so each component of a coupled
run is bit-identical to a solo run with the same seed and start.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from swindle_utils.core_rng import StepNoise, chain_streams, draw_batch_noise, philox_generator
from swindle_utils.errors import ConfigError, ContractViolationError
from swindle_utils.integrator import LeapfrogConfig, PhaseState, integrate, kinetic_energy
from swindle_utils.targets import TargetDensity

logger = logging.getLogger(__name__)

__all__ = [
    "KernelKind",
    "CouplingMode",
    "KernelConfig",
    "ChainState",
    "StepInfo",
    "ChainTrace",
    "CoupledTraces",
    "mh_adjust",
    "hmc_step",
    "mala_step",
    "rwm_step",
    "make_kernel",
    "run_chain",
    "run_coupled",
    "run_cva",
    "draw_initial_states",
]


class KernelKind(str, Enum):
    HMC = "hmc"
    MALA = "mala"
    RWM = "rwm"


class CouplingMode(str, Enum):
    SHARED = "shared"
    ANTITHETIC = "antithetic"
    CVA = "cva"


@dataclass(frozen=True)
class KernelConfig:
    kind: KernelKind
    num_steps: int
    burn_in: int = 0
    leapfrog: Optional[LeapfrogConfig] = None
    step_size: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.num_steps < 1:
            raise ConfigError(f"number of steps must be positive, got {self.num_steps}")
        if not 0 <= self.burn_in < self.num_steps:
            raise ConfigError(f"burn-in {self.burn_in} must lie in [0, {self.num_steps})")
        if self.kind is KernelKind.HMC and self.leapfrog is None:
            raise ConfigError("hmc kernel requires a leapfrog config")
        if self.kind is KernelKind.MALA and not (self.step_size or 0.0) > 0.0:
            raise ConfigError("mala kernel requires a positive step size")
        if self.kind is KernelKind.RWM and (self.step_size is None or self.step_size < 0.0):
            raise ConfigError("rwm kernel requires a non-negative step size")


@dataclass
class ChainState:
    position: np.ndarray
    potential: np.ndarray
    grad: Optional[np.ndarray] = None


@dataclass
class StepInfo:
    accepted: np.ndarray
    log_accept_ratio: np.ndarray
    energy_error: np.ndarray
    diverged: np.ndarray
    grad_evals: int = 0
    potential_evals: int = 0


def mh_adjust(
    q0: np.ndarray, q1: np.ndarray, h0: np.ndarray, h1: np.ndarray, b: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Accept ``q1`` iff ``b < min(1, exp(h0 - h1))``; a non-finite ``h1`` always rejects."""
    h0 = np.asarray(h0, dtype=np.float64)
    h1 = np.asarray(h1, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        threshold = np.exp(np.minimum(h0 - h1, 0.0))
    accepted = np.asarray(np.isfinite(h1) & (np.asarray(b) < threshold))
    q0 = np.asarray(q0)
    q1 = np.asarray(q1)
    mask = accepted[..., None] if q0.ndim > np.ndim(accepted) else accepted
    return np.where(mask, q1, q0), accepted


def _select(accepted: np.ndarray, new: np.ndarray, old: np.ndarray) -> np.ndarray:
    mask = accepted[..., None] if np.ndim(new) > np.ndim(accepted) else accepted
    return np.where(mask, new, old)


class TransitionKernel(ABC):
    kind: KernelKind

    @abstractmethod
    def init_state(self, target: TargetDensity, x: np.ndarray) -> Tuple[ChainState, int, int]:
        """Return the cached state plus (gradient, potential) evaluation counts."""

    @abstractmethod
    def step(self, target: TargetDensity, state: ChainState, noise: StepNoise) -> Tuple[ChainState, StepInfo]:
        ...


class HMCKernel(TransitionKernel):
    kind = KernelKind.HMC

    def __init__(self, leapfrog: LeapfrogConfig) -> None:
        self.leapfrog = leapfrog

    def init_state(self, target: TargetDensity, x: np.ndarray) -> Tuple[ChainState, int, int]:
        u, g = target.potential_and_grad(x)
        return ChainState(np.asarray(x, dtype=np.float64), u, g), 1, 0

    def step(self, target: TargetDensity, state: ChainState, noise: StepNoise) -> Tuple[ChainState, StepInfo]:
        p0 = noise.momentum
        result = integrate(target, PhaseState(state.position, p0), self.leapfrog, grad=state.grad)
        h0 = kinetic_energy(p0) + state.potential
        with np.errstate(invalid="ignore", over="ignore"):
            h1 = kinetic_energy(result.state.p) + result.potential
        h1 = np.where(result.diverged, np.inf, h1)
        position, accepted = mh_adjust(state.position, result.state.q, h0, h1, noise.uniform)
        new_state = ChainState(
            position=position,
            potential=np.where(accepted, result.potential, state.potential),
            grad=_select(accepted, result.grad, state.grad),
        )
        with np.errstate(invalid="ignore"):
            energy_error = h1 - h0
        info = StepInfo(
            accepted=accepted,
            log_accept_ratio=np.minimum(h0 - h1, 0.0),
            energy_error=energy_error,
            diverged=result.diverged,
            grad_evals=result.grad_evals,
        )
        return new_state, info


class MALAKernel(TransitionKernel):
    kind = KernelKind.MALA

    def __init__(self, step_size: float) -> None:
        self.step_size = step_size

    def init_state(self, target: TargetDensity, x: np.ndarray) -> Tuple[ChainState, int, int]:
        u, g = target.potential_and_grad(x)
        return ChainState(np.asarray(x, dtype=np.float64), u, g), 1, 0

    def step(self, target: TargetDensity, state: ChainState, noise: StepNoise) -> Tuple[ChainState, StepInfo]:
        eps = self.step_size
        half_eps2 = 0.5 * eps * eps
        x = state.position
        xi = noise.momentum
        proposal = x - half_eps2 * state.grad + eps * xi
        with np.errstate(invalid="ignore", over="ignore"):
            u1, g1 = target.potential_and_grad(proposal)
            reverse = (x - proposal + half_eps2 * g1) / eps
            h0 = state.potential + kinetic_energy(xi)
            h1 = u1 + kinetic_energy(reverse)
        diverged = ~np.isfinite(h1)
        position, accepted = mh_adjust(x, proposal, h0, h1, noise.uniform)
        new_state = ChainState(
            position=position,
            potential=np.where(accepted, u1, state.potential),
            grad=_select(accepted, g1, state.grad),
        )
        info = StepInfo(
            accepted=accepted,
            log_accept_ratio=np.minimum(h0 - h1, 0.0),
            energy_error=h1 - h0,
            diverged=diverged,
            grad_evals=1,
        )
        return new_state, info


class RWMKernel(TransitionKernel):
    kind = KernelKind.RWM

    def __init__(self, step_size: float) -> None:
        self.step_size = step_size

    def init_state(self, target: TargetDensity, x: np.ndarray) -> Tuple[ChainState, int, int]:
        return ChainState(np.asarray(x, dtype=np.float64), target.potential(x)), 0, 1

    def step(self, target: TargetDensity, state: ChainState, noise: StepNoise) -> Tuple[ChainState, StepInfo]:
        proposal = state.position + self.step_size * noise.momentum
        with np.errstate(invalid="ignore", over="ignore"):
            u1 = target.potential(proposal)
        position, accepted = mh_adjust(state.position, proposal, state.potential, u1, noise.uniform)
        new_state = ChainState(position=position, potential=np.where(accepted, u1, state.potential))
        info = StepInfo(
            accepted=accepted,
            log_accept_ratio=np.minimum(state.potential - u1, 0.0),
            energy_error=u1 - state.potential,
            diverged=~np.isfinite(u1),
            potential_evals=1,
        )
        return new_state, info


def make_kernel(cfg: KernelConfig) -> TransitionKernel:
    if cfg.kind is KernelKind.HMC:
        return HMCKernel(cfg.leapfrog)
    if cfg.kind is KernelKind.MALA:
        return MALAKernel(cfg.step_size)
    return RWMKernel(cfg.step_size)


def _one_step(kernel: TransitionKernel, target: TargetDensity, x: np.ndarray, noise: StepNoise):
    state, _, _ = kernel.init_state(target, x)
    new_state, info = kernel.step(target, state, noise)
    return new_state.position, info.accepted, info


def hmc_step(target: TargetDensity, x: np.ndarray, noise: StepNoise, cfg: LeapfrogConfig):
    """One Metropolis-adjusted HMC transition driven by ``noise``."""
    return _one_step(HMCKernel(cfg), target, x, noise)


def mala_step(target: TargetDensity, x: np.ndarray, noise: StepNoise, step_size: float):
    """One MALA transition; ``noise.momentum`` is the proposal's Gaussian noise."""
    return _one_step(MALAKernel(step_size), target, x, noise)


def rwm_step(target: TargetDensity, x: np.ndarray, noise: StepNoise, step_size: float):
    return _one_step(RWMKernel(step_size), target, x, noise)


@dataclass
class ChainTrace:
    """Samples ``X_1..X_n`` of a batch of chains.

    ``samples`` has shape ``(n, B, D)``; per-step arrays have shape ``(n, B)``.
    ``grad_evals``/``potential_evals`` are totals over the batch, including
    the evaluation at the initial state.
    """

    samples: np.ndarray
    accepted: np.ndarray
    log_accept_ratio: np.ndarray
    energy_error: np.ndarray
    diverged: np.ndarray
    initial: np.ndarray
    kind: KernelKind
    burn_in: int = 0
    grad_evals: int = 0
    potential_evals: int = 0

    @property
    def num_steps(self) -> int:
        return self.samples.shape[0]

    @property
    def num_chains(self) -> int:
        return self.samples.shape[1]

    @property
    def dim(self) -> int:
        return self.samples.shape[2]

    @property
    def cost_evals(self) -> int:
        """Target evaluations billed to this trace (gradients, or potentials for RWM)."""
        return self.grad_evals if self.kind is not KernelKind.RWM else self.potential_evals

    def kept(self) -> np.ndarray:
        return self.samples[self.burn_in :]

    def chain(self, k: int) -> np.ndarray:
        return self.samples[:, k, :]

    def acceptance_rate(self, post_burn_in: bool = True) -> np.ndarray:
        acc = self.accepted[self.burn_in :] if post_burn_in else self.accepted
        return acc.mean(axis=0)


@dataclass
class CoupledTraces:
    """Aligned traces of one coupled chain group.

    ``control`` is Y+ (or the shared-noise partner), ``antithetic`` is X-,
    ``reflected`` is Y- = 2 mu - Y+.
    """

    primary: ChainTrace
    mode: CouplingMode
    seed: int
    center: np.ndarray
    control: Optional[ChainTrace] = None
    antithetic: Optional[ChainTrace] = None
    reflected: Optional[ChainTrace] = None

    @property
    def partner(self) -> ChainTrace:
        if self.control is not None:
            return self.control
        if self.antithetic is not None:
            return self.antithetic
        raise ConfigError("coupled traces carry no partner chain")

    @property
    def has_all_chains(self) -> bool:
        return None not in (self.control, self.antithetic, self.reflected)


class _TraceRecorder:
    def __init__(self, n: int, x0: np.ndarray, kind: KernelKind, burn_in: int) -> None:
        b, d = x0.shape
        self.kind = kind
        self.burn_in = burn_in
        self.initial = x0.copy()
        self.samples = np.empty((n, b, d))
        self.accepted = np.empty((n, b), dtype=bool)
        self.log_accept_ratio = np.empty((n, b))
        self.energy_error = np.empty((n, b))
        self.diverged = np.empty((n, b), dtype=bool)
        self.grad_evals = 0
        self.potential_evals = 0

    def bill(self, grads: int, potentials: int) -> None:
        self.grad_evals += grads
        self.potential_evals += potentials

    def record(self, i: int, state: ChainState, info: StepInfo) -> None:
        b = self.samples.shape[1]
        self.samples[i] = state.position
        self.accepted[i] = info.accepted
        self.log_accept_ratio[i] = info.log_accept_ratio
        self.energy_error[i] = info.energy_error
        self.diverged[i] = info.diverged
        self.bill(info.grad_evals * b, info.potential_evals * b)

    def finish(self) -> ChainTrace:
        num_diverged = int(self.diverged.sum())
        if num_diverged:
            logger.warning("%s chain: %d divergent transitions rejected", self.kind.value, num_diverged)
        return ChainTrace(
            samples=self.samples,
            accepted=self.accepted,
            log_accept_ratio=self.log_accept_ratio,
            energy_error=self.energy_error,
            diverged=self.diverged,
            initial=self.initial,
            kind=self.kind,
            burn_in=self.burn_in,
            grad_evals=self.grad_evals,
            potential_evals=self.potential_evals,
        )


def _as_batch(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ContractViolationError(f"initial states must have shape (B, {dim}), got {x.shape}")
    return x


class _ChainDriver:
    """One kernel advancing one batch of chains on one target."""

    def __init__(self, kernel: TransitionKernel, target: TargetDensity, x0: np.ndarray, cfg: KernelConfig) -> None:
        self.kernel = kernel
        self.target = target
        self.state, grads, potentials = kernel.init_state(target, x0)
        self.recorder = _TraceRecorder(cfg.num_steps, x0, kernel.kind, cfg.burn_in)
        self.recorder.bill(grads * x0.shape[0], potentials * x0.shape[0])

    def advance(self, i: int, noise: StepNoise) -> None:
        self.state, info = self.kernel.step(self.target, self.state, noise)
        self.recorder.record(i, self.state, info)


def run_chain(
    target: TargetDensity,
    x0: np.ndarray,
    cfg: KernelConfig,
    seed: int,
    negate_noise: bool = False,
) -> ChainTrace:
    """Solo run of a batch of chains."""
    x0 = _as_batch(x0, target.dim)
    streams = chain_streams(seed, x0.shape[0], target.dim)
    driver = _ChainDriver(make_kernel(cfg), target, x0, cfg)
    for i in range(cfg.num_steps):
        noise = draw_batch_noise(streams, i)
        driver.advance(i, noise.negated() if negate_noise else noise)
    return driver.recorder.finish()


def run_coupled(
    target_x: TargetDensity,
    target_y: TargetDensity,
    x0: np.ndarray,
    y0: np.ndarray,
    mode: CouplingMode,
    cfg: KernelConfig,
    seed: int,
    center: Optional[np.ndarray] = None,
) -> CoupledTraces:
    """Two chains coupled through shared (``shared``) or mirrored (``antithetic``) noise.

    Both chains read the same noise; in antithetic mode the partner's momentum
    (proposal noise for MALA/RWM) is negated while the accept uniform is shared.
    """
    mode = CouplingMode(mode)
    if mode is CouplingMode.CVA:
        raise ConfigError("use run_cva for the combined control/antithetic scheme")
    if target_x.dim != target_y.dim:
        raise ContractViolationError(
            f"coupled targets differ in dimension: {target_x.dim} vs {target_y.dim}"
        )
    x0 = _as_batch(x0, target_x.dim)
    y0 = _as_batch(y0, target_y.dim)
    if x0.shape != y0.shape:
        raise ContractViolationError(f"initial batches differ: {x0.shape} vs {y0.shape}")
    streams = chain_streams(seed, x0.shape[0], target_x.dim)
    x_driver = _ChainDriver(make_kernel(cfg), target_x, x0, cfg)
    y_driver = _ChainDriver(make_kernel(cfg), target_y, y0, cfg)
    antithetic = mode is CouplingMode.ANTITHETIC
    for i in range(cfg.num_steps):
        noise = draw_batch_noise(streams, i)
        x_driver.advance(i, noise)
        y_driver.advance(i, noise.negated() if antithetic else noise)
    if center is None:
        center = np.zeros(target_x.dim)
    partner = y_driver.recorder.finish()
    return CoupledTraces(
        primary=x_driver.recorder.finish(),
        mode=mode,
        seed=seed,
        center=np.asarray(center, dtype=np.float64),
        control=None if antithetic else partner,
        antithetic=partner if antithetic else None,
    )


def run_cva(
    target: TargetDensity,
    surrogate: TargetDensity,
    x0_plus: np.ndarray,
    x0_minus: np.ndarray,
    y0_plus: np.ndarray,
    cfg: KernelConfig,
    seed: int,
) -> CoupledTraces:
    """Combined scheme: X+ and X- on the target with negated momenta, Y+ on the surrogate.

    Y- is never simulated: ``Y-_i = 2 mu - Y+_i`` with ``mu`` the surrogate's
    known mean.
    """
    if surrogate.known_mean is None:
        raise ConfigError("the control-variate surrogate must have a known mean")
    if target.dim != surrogate.dim:
        raise ContractViolationError(
            f"target dimension {target.dim} does not match surrogate dimension {surrogate.dim}"
        )
    mu = np.asarray(surrogate.known_mean, dtype=np.float64)
    x0_plus = _as_batch(x0_plus, target.dim)
    x0_minus = _as_batch(x0_minus, target.dim)
    y0_plus = _as_batch(y0_plus, target.dim)
    if not x0_plus.shape == x0_minus.shape == y0_plus.shape:
        raise ContractViolationError("initial batches of the CVA chains differ in shape")
    streams = chain_streams(seed, x0_plus.shape[0], target.dim)
    plus = _ChainDriver(make_kernel(cfg), target, x0_plus, cfg)
    minus = _ChainDriver(make_kernel(cfg), target, x0_minus, cfg)
    control = _ChainDriver(make_kernel(cfg), surrogate, y0_plus, cfg)
    for i in range(cfg.num_steps):
        noise = draw_batch_noise(streams, i)
        plus.advance(i, noise)
        minus.advance(i, noise.negated())
        control.advance(i, noise)
    y_plus = control.recorder.finish()
    y_minus = replace(
        y_plus,
        samples=2.0 * mu - y_plus.samples,
        initial=2.0 * mu - y_plus.initial,
        grad_evals=0,
        potential_evals=0,
    )
    return CoupledTraces(
        primary=plus.recorder.finish(),
        mode=CouplingMode.CVA,
        seed=seed,
        center=mu,
        control=y_plus,
        antithetic=minus.recorder.finish(),
        reflected=y_minus,
    )


def draw_initial_states(num_chains: int, dim: int, seed: int) -> np.ndarray:
    """Initial states drawn from the latent surrogate N(0, I)."""
    return philox_generator(seed, sub_stream=3).standard_normal((num_chains, dim))
