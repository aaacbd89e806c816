"""Kick-drift-kick leapfrog integration of H(q, p) = |p|^2 / 2 + U(q)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from swindle_utils.errors import ConfigError, ContractViolationError, DivergenceError
from swindle_utils.targets import TargetDensity

__all__ = [
    "PhaseState",
    "LeapfrogConfig",
    "LeapfrogResult",
    "leapfrog",
    "integrate",
    "hamiltonian",
    "kinetic_energy",
]


@dataclass(frozen=True)
class PhaseState:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        if np.shape(self.q) != np.shape(self.p):
            raise ContractViolationError(
                f"position {np.shape(self.q)} and momentum {np.shape(self.p)} shapes differ"
            )


@dataclass(frozen=True)
class LeapfrogConfig:
    step_size: float
    num_steps: int

    def __post_init__(self) -> None:
        if not self.step_size > 0.0:
            raise ConfigError(f"leapfrog step size must be positive, got {self.step_size}")
        if self.num_steps < 1:
            raise ConfigError(f"leapfrog step count must be >= 1, got {self.num_steps}")

    @property
    def trajectory_length(self) -> float:
        return self.step_size * self.num_steps

    @classmethod
    def from_trajectory_length(cls, trajectory_length: float, num_steps: int) -> "LeapfrogConfig":
        if num_steps < 1:
            raise ConfigError(f"leapfrog step count must be >= 1, got {num_steps}")
        return cls(step_size=trajectory_length / num_steps, num_steps=num_steps)


@dataclass
class LeapfrogResult:
    state: PhaseState
    potential: np.ndarray
    grad: np.ndarray
    grad_evals: int
    diverged: np.ndarray
    diverged_at: np.ndarray


def kinetic_energy(p: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(p * p, axis=-1)


def hamiltonian(target: TargetDensity, s: PhaseState) -> np.ndarray:
    return kinetic_energy(s.p) + target.potential(s.q)


def integrate(
    target: TargetDensity,
    s: PhaseState,
    cfg: LeapfrogConfig,
    grad: Optional[np.ndarray] = None,
) -> LeapfrogResult:
    """Run ``cfg.num_steps`` leapfrog steps, masking divergent chains.

    ``grad`` is the cached gradient at ``s.q``; when given, the trajectory costs
    ``L`` gradient evaluations, otherwise ``L + 1``. Chains whose state turns
    non-finite are flagged in ``diverged`` (``diverged_at`` holds the 1-based
    leapfrog step, 0 if the chain stayed finite); callers reject them.
    """
    q = np.array(s.q, dtype=np.float64)
    p = np.array(s.p, dtype=np.float64)
    eps = cfg.step_size
    grad_evals = 0
    if grad is None:
        grad = target.grad_potential(q)
        grad_evals += 1
    batch_shape = q.shape[:-1]
    diverged = np.zeros(batch_shape, dtype=bool)
    diverged_at = np.zeros(batch_shape, dtype=np.int64)
    u = None

    p = p - 0.5 * eps * grad
    for step in range(1, cfg.num_steps + 1):
        q = q + eps * p
        with np.errstate(over="ignore", invalid="ignore"):
            u, grad = target.potential_and_grad(q)
        grad_evals += 1
        kick = eps if step < cfg.num_steps else 0.5 * eps
        p = p - kick * grad
        bad = ~(np.isfinite(u) & np.all(np.isfinite(q), axis=-1) & np.all(np.isfinite(p), axis=-1))
        newly = bad & ~diverged
        if np.any(newly):
            diverged_at = np.where(newly, step, diverged_at)
            diverged = diverged | bad
    return LeapfrogResult(
        state=PhaseState(q, p),
        potential=np.asarray(u),
        grad=grad,
        grad_evals=grad_evals,
        diverged=diverged,
        diverged_at=diverged_at,
    )


def leapfrog(target: TargetDensity, s: PhaseState, cfg: LeapfrogConfig) -> LeapfrogResult:
    """Integrate one trajectory; any non-finite state raises ``DivergenceError``."""
    q = target.check_point(s.q)
    if np.shape(s.p) != q.shape:
        raise ContractViolationError("momentum shape does not match position shape")
    result = integrate(target, s, cfg)
    if np.any(result.diverged):
        step = int(np.min(result.diverged_at[result.diverged]))
        raise DivergenceError(step)
    return result
