"""Counter-based, replayable noise for coupled Markov chains.

Every transition index ``i`` of a stream owns its own Philox counter block, so
the noise for step ``i`` is computed directly from ``(seed, i)`` without
generating the steps before it. Coupled chains that read the same stream at the
same index therefore see bit-identical momenta and accept uniforms, no matter
in which order they are advanced.

Stable conventions (same seed + same config gives the same bits):

* key: ``seed`` in the low 64 bits, sub-stream id in the high 64 bits
  (0 = momentum, 1 = accept uniform);
* counter: the step index in the most significant 64-bit word;
* uniforms: the top 53 bits of each raw 64-bit word, ``u = (r >> 11) * 2**-53``;
* Gaussians: inverse CDF, ``z = ndtri((r >> 11) * 2**-53 + 2**-54)``, which keeps
  the argument strictly inside (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from swindle_utils.errors import ContractViolationError

__all__ = [
    "NoiseStream",
    "StepNoise",
    "chain_seed",
    "chain_streams",
    "draw_step_noise",
    "draw_batch_noise",
    "philox_generator",
]

_MASK64 = (1 << 64) - 1
_MOMENTUM_STREAM = 0
_UNIFORM_STREAM = 1
_INV_2_53 = 2.0 ** -53


@dataclass(frozen=True)
class NoiseStream:
    seed: int
    dim: int
    step: int = 0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ContractViolationError(f"noise stream dimension must be >= 1, got {self.dim}")
        if self.step < 0:
            raise ContractViolationError(f"step counter must be non-negative, got {self.step}")

    def advance(self, steps: int = 1) -> "NoiseStream":
        return NoiseStream(self.seed, self.dim, self.step + steps)


@dataclass(frozen=True)
class StepNoise:
    """Momentum (or proposal noise) and the accept uniform of one transition.

    ``momentum`` has shape ``(D,)`` or ``(B, D)``; ``uniform`` is a scalar or
    ``(B,)`` accordingly.
    """

    momentum: np.ndarray
    uniform: np.ndarray

    def negated(self) -> "StepNoise":
        return StepNoise(-self.momentum, self.uniform)


def _raw_block(seed: int, sub_stream: int, step: int, count: int) -> np.ndarray:
    key = ((sub_stream & _MASK64) << 64) | (int(seed) & _MASK64)
    bit_generator = np.random.Philox(key=key, counter=int(step) << 192)
    return bit_generator.random_raw(count)


def draw_step_noise(stream: NoiseStream, i: int) -> StepNoise:
    """Return the ``i``-th (momentum, uniform) pair of ``stream``."""
    if i < 0:
        raise ContractViolationError(f"step index must be non-negative, got {i}")
    raw_p = _raw_block(stream.seed, _MOMENTUM_STREAM, i, stream.dim)
    raw_b = _raw_block(stream.seed, _UNIFORM_STREAM, i, 1)
    momentum = ndtri((raw_p >> np.uint64(11)).astype(np.float64) * _INV_2_53 + 0.5 * _INV_2_53)
    uniform = (raw_b >> np.uint64(11)).astype(np.float64)[0] * _INV_2_53
    return StepNoise(momentum=momentum, uniform=np.float64(uniform))


def draw_batch_noise(streams: Sequence[NoiseStream], i: int) -> StepNoise:
    """Stack step ``i`` of several streams into one batched ``StepNoise``."""
    draws = [draw_step_noise(s, i) for s in streams]
    return StepNoise(
        momentum=np.stack([d.momentum for d in draws]),
        uniform=np.array([d.uniform for d in draws], dtype=np.float64),
    )


def chain_seed(seed: int, chain: int) -> int:
    """Seed of chain ``chain`` in a batch driven by ``seed``."""
    state = np.random.SeedSequence([int(seed) & _MASK64, int(chain)]).generate_state(1, np.uint64)
    return int(state[0])


def chain_streams(seed: int, num_chains: int, dim: int) -> list[NoiseStream]:
    return [NoiseStream(chain_seed(seed, k), dim) for k in range(num_chains)]


def philox_generator(seed: int, sub_stream: int = 2) -> np.random.Generator:
    """A sequential ``Generator`` for non-chain randomness (VI, initial states, datasets).

    Uses sub-stream ids >= 2 so it never overlaps chain noise for the same seed.
    """
    key = ((sub_stream & _MASK64) << 64) | (int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))
