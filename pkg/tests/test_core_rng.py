import numpy as np
import pytest
from scipy import stats

from swindle_utils.core_rng import (
    NoiseStream,
    chain_seed,
    chain_streams,
    draw_batch_noise,
    draw_step_noise,
    philox_generator,
)
from swindle_utils.errors import ContractViolationError


def test_same_stream_and_index_give_identical_bits():
    stream = NoiseStream(seed=7, dim=5)
    a = draw_step_noise(stream, 3)
    b = draw_step_noise(NoiseStream(seed=7, dim=5), 3)
    np.testing.assert_array_equal(a.momentum, b.momentum)
    assert a.uniform == b.uniform


def test_random_access_does_not_depend_on_draw_order():
    stream = NoiseStream(seed=11, dim=3)
    late_first = draw_step_noise(stream, 40)
    for i in range(40):
        draw_step_noise(stream, i)
    again = draw_step_noise(stream, 40)
    np.testing.assert_array_equal(late_first.momentum, again.momentum)


def test_steps_and_seeds_differ():
    stream = NoiseStream(seed=1, dim=4)
    assert not np.array_equal(draw_step_noise(stream, 0).momentum, draw_step_noise(stream, 1).momentum)
    other = NoiseStream(seed=2, dim=4)
    assert not np.array_equal(draw_step_noise(stream, 0).momentum, draw_step_noise(other, 0).momentum)


def test_negated_noise_shares_the_uniform():
    noise = draw_step_noise(NoiseStream(seed=3, dim=6), 5)
    flipped = noise.negated()
    np.testing.assert_array_equal(flipped.momentum, -noise.momentum)
    assert flipped.uniform == noise.uniform


def test_uniforms_in_unit_interval_and_gaussian_moments():
    stream = NoiseStream(seed=2024, dim=5)
    draws = [draw_step_noise(stream, i) for i in range(2000)]
    momenta = np.stack([d.momentum for d in draws])
    uniforms = np.array([d.uniform for d in draws])
    assert np.all((uniforms >= 0.0) & (uniforms < 1.0))
    assert np.all(np.isfinite(momenta))
    se = 1.0 / np.sqrt(momenta.shape[0])
    assert np.all(np.abs(momenta.mean(axis=0)) < 4.0 * se)
    np.testing.assert_allclose(momenta.var(axis=0), 1.0, rtol=0.1)
    assert abs(uniforms.mean() - 0.5) < 4.0 * np.sqrt(1.0 / 12.0 / uniforms.size)


def test_batch_noise_stacks_per_chain_streams():
    streams = chain_streams(seed=9, num_chains=4, dim=2)
    batch = draw_batch_noise(streams, 12)
    assert batch.momentum.shape == (4, 2)
    assert batch.uniform.shape == (4,)
    for k, s in enumerate(streams):
        solo = draw_step_noise(s, 12)
        np.testing.assert_array_equal(batch.momentum[k], solo.momentum)
        assert batch.uniform[k] == solo.uniform


def test_chain_seeds_are_deterministic_and_distinct():
    seeds = [chain_seed(5, k) for k in range(100)]
    assert len(set(seeds)) == 100
    assert seeds == [chain_seed(5, k) for k in range(100)]
    assert chain_seed(5, 0) != chain_seed(6, 0)


def test_philox_generator_replays_and_separates_sub_streams():
    a = philox_generator(4, sub_stream=3).standard_normal(8)
    b = philox_generator(4, sub_stream=3).standard_normal(8)
    c = philox_generator(4, sub_stream=5).standard_normal(8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_invalid_stream_arguments_raise():
    with pytest.raises(ContractViolationError):
        NoiseStream(seed=0, dim=0)
    with pytest.raises(ContractViolationError):
        draw_step_noise(NoiseStream(seed=0, dim=2), -1)


def test_chain_streams_are_uncorrelated_and_well_distributed():
    n = 4000
    streams = chain_streams(seed=31, num_chains=2, dim=3)
    draws = [draw_batch_noise(streams, i) for i in range(n)]
    momenta = np.stack([d.momentum for d in draws])
    uniforms = np.stack([d.uniform for d in draws])
    bound = 4.0 / np.sqrt(n)
    # across chains, within a step, and from one step to the next
    assert abs(np.corrcoef(momenta[:, 0, 0], momenta[:, 1, 0])[0, 1]) < bound
    assert abs(np.corrcoef(uniforms[:, 0], uniforms[:, 1])[0, 1]) < bound
    assert abs(np.corrcoef(momenta[:, 0, 1], uniforms[:, 0])[0, 1]) < bound
    assert abs(np.corrcoef(momenta[:-1, 0, 2], momenta[1:, 0, 2])[0, 1]) < bound
    assert stats.kstest(momenta.ravel(), "norm").pvalue > 1e-3
    assert stats.kstest(uniforms.ravel(), "uniform").pvalue > 1e-3
