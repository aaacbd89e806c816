import numpy as np
import pytest
from scipy.signal import lfilter

from conftest import diagonal_gaussian
from swindle_utils.diagnostics import (
    SUPER_EFFICIENCY_CAP,
    coupling_stats,
    efficiency_bound,
    ess,
    ess_from_replications,
    grid_cell_gap,
    predict_vr_ess,
    rhat,
    tuning_curve,
)
from swindle_utils.errors import (
    ConfigError,
    ContractViolationError,
    InsufficientChainsError,
    InsufficientDataError,
    UndefinedEssError,
)
from swindle_utils.integrator import LeapfrogConfig
from swindle_utils.samplers import (
    ChainTrace,
    CoupledTraces,
    CouplingMode,
    KernelConfig,
    KernelKind,
    draw_initial_states,
    run_chain,
    run_coupled,
)
from swindle_utils.swindles import mean_function
from swindle_utils.targets import standard_normal


def ar1(rng, phi: float, n: int) -> np.ndarray:
    noise = rng.standard_normal(n)
    return lfilter([1.0], [1.0, -phi], noise)


def iid_trace(values: np.ndarray) -> ChainTrace:
    n = values.shape[0]
    samples = values.reshape(n, 1, -1)
    return ChainTrace(
        samples=samples,
        accepted=np.ones((n, 1), dtype=bool),
        log_accept_ratio=np.zeros((n, 1)),
        energy_error=np.zeros((n, 1)),
        diverged=np.zeros((n, 1), dtype=bool),
        initial=np.zeros((1, samples.shape[2])),
        kind=KernelKind.HMC,
    )


# --------------------------------------------------------------------- ESS


def test_iid_ess_is_close_to_sample_size(rng):
    x = rng.standard_normal(10_000)
    report = ess(x)
    assert 0.8 <= report.ess[0] / 10_000 <= 1.2
    assert report.num_draws == 10_000


def test_ar1_ess_matches_integrated_time(rng):
    x = ar1(rng, 0.5, 100_000)
    assert ess(x).ess[0] / x.size == pytest.approx(1.0 / 3.0, rel=0.1)


def test_ar1_ess_is_consistent_across_replications(rng):
    truth = 1.0 / 3.0
    errors = [abs(ess(ar1(rng, 0.5, 4000)).ess[0] / 4000 - truth) / truth for _ in range(50)]
    assert np.median(errors) < 0.1


def test_multi_chain_components(rng):
    chains = rng.standard_normal((4, 2000, 3))
    report = ess(chains, grad_evals=400)
    assert report.ess.shape == (3,)
    assert np.all((report.ess > 0.8 * 8000) & (report.ess < 1.2 * 8000))
    np.testing.assert_allclose(report.ess_per_grad, report.ess / 400)


def test_rank_normalized_ess_on_iid(rng):
    x = rng.standard_exponential((2, 5000))
    report = ess(x, rank_normalize=True)
    assert 0.8 <= report.ess[0] / 10_000 <= 1.2


def test_constant_chain_without_reference_is_undefined():
    with pytest.raises(UndefinedEssError):
        ess(np.ones((2, 100)))


def test_constant_chain_with_reference_hits_the_cap():
    report = ess(np.ones((2, 100)), reference_variance=1.0)
    assert report.ess[0] == SUPER_EFFICIENCY_CAP * 200


def test_reference_variance_scales_ess(rng):
    x = 0.1 * rng.standard_normal((1, 5000))
    plain = ess(x).ess[0]
    scored = ess(x, reference_variance=0.04).ess[0]
    assert scored == pytest.approx(plain * 0.04 / x.var(), rel=1e-9)


def test_short_or_broken_chains_raise(rng):
    with pytest.raises(InsufficientDataError):
        ess(rng.standard_normal(7))
    bad = rng.standard_normal(100)
    bad[3] = np.nan
    with pytest.raises(ContractViolationError):
        ess(bad)


def test_across_replication_ess(rng):
    estimates = rng.normal(0.0, 0.1, size=(50, 2))
    out = ess_from_replications(estimates, reference_variance=1.0, num_draws=1000)
    assert np.all((out > 50.0) & (out < 200.0))
    capped = ess_from_replications(np.ones((5, 1)), 1.0, num_draws=1000)
    assert capped[0] == SUPER_EFFICIENCY_CAP * 1000
    with pytest.raises(InsufficientDataError):
        ess_from_replications(np.ones((1, 2)), 1.0, 1000)


# ------------------------------------------------------------------- R-hat


def test_rhat_of_white_noise_is_near_one(rng):
    assert rhat(rng.standard_normal((4, 10_000)))[0] < 1.01


def test_rhat_flags_an_offset_chain(rng):
    chains = rng.standard_normal((4, 10_000))
    chains[0] += 10.0
    assert rhat(chains)[0] > 2.0


def test_rhat_of_identical_chains(rng):
    chains = np.tile(rng.standard_normal(10_000), (4, 1))
    assert rhat(chains)[0] < 1.01


def test_rhat_degenerate_inputs(rng):
    assert rhat(np.ones((3, 100)))[0] == 1.0
    with pytest.raises(InsufficientChainsError):
        rhat(rng.standard_normal((1, 100)))
    with pytest.raises(InsufficientDataError):
        rhat(rng.standard_normal((4, 3)))


# -------------------------------------------------------------- coupling


@pytest.fixture(scope="module")
def hmc_trace():
    cfg = KernelConfig(KernelKind.HMC, 300, 50, leapfrog=LeapfrogConfig(0.9, 3))
    return run_chain(standard_normal(3), draw_initial_states(4, 3, seed=60), cfg, seed=61)


def test_coupling_stats_of_a_chain_with_itself(hmc_trace):
    traces = CoupledTraces(hmc_trace, CouplingMode.SHARED, 0, np.zeros(3), control=hmc_trace)
    stats = coupling_stats(traces, mean_function(3))
    np.testing.assert_allclose(stats.rho, 1.0)
    assert stats.decoupling_rate == 0.0
    assert stats.joint_rejection_rate == pytest.approx(stats.rejection_rate)
    assert np.isnan(stats.contraction_rate)


def test_coupling_stats_of_independent_draws(rng):
    n = 4000
    x = iid_trace(rng.standard_normal((n, 1)))
    y = iid_trace(rng.standard_normal((n, 1)))
    stats = coupling_stats(CoupledTraces(x, CouplingMode.SHARED, 0, np.zeros(1), control=y), mean_function(1))
    assert abs(stats.rho[0]) < 3.0 / np.sqrt(n) * 1.5
    assert stats.acceptance == 1.0 and stats.partner_acceptance == 1.0


def test_decoupling_never_exceeds_the_larger_rejection_rate():
    cfg = KernelConfig(KernelKind.HMC, 400, 100, leapfrog=LeapfrogConfig(0.9, 3))
    x0 = draw_initial_states(8, 3, seed=70)
    surrogate = diagonal_gaussian([1.0, 1.0, 1.05])
    traces = run_coupled(standard_normal(3), surrogate, x0, x0, CouplingMode.SHARED, cfg, seed=71)
    stats = coupling_stats(traces, mean_function(3))
    assert stats.rejection_rate > 0.0
    assert stats.decoupling_rate <= max(stats.rejection_rate, 1.0 - stats.partner_acceptance)


def test_coupled_traces_without_partner():
    trace = iid_trace(np.zeros((10, 1)))
    with pytest.raises(ConfigError):
        CoupledTraces(trace, CouplingMode.SHARED, 0, np.zeros(1)).partner


# --------------------------------------------------------- VR prediction


@pytest.mark.parametrize(
    "rho,kind,expected",
    [
        (0.0, "control", 1.0),
        (0.0, "antithetic", 2.0),
        (0.9, "control", 1.0 / 0.19),
        (-0.5, "antithetic", 4.0),
    ],
)
def test_predict_vr_ess(rho, kind, expected):
    assert predict_vr_ess(1.0, rho, kind) == pytest.approx(expected, rel=1e-9)


def test_predict_vr_ess_degenerate_and_unknown():
    assert predict_vr_ess(1.0, 1.0, "control") == float("inf")
    assert predict_vr_ess(1.0, -1.0, "antithetic") == float("inf")
    with pytest.raises(ConfigError):
        predict_vr_ess(1.0, 0.5, "reflect")


# ------------------------------------------------------------ tuning curve


def test_cdf_bound_is_increasing():
    grid = np.linspace(0.01, 0.99, 99)
    assert np.all(np.diff(efficiency_bound(grid, "cdf")) > 0.0)
    with pytest.raises(ConfigError):
        efficiency_bound(grid, "median")


def test_constant_rho_recommends_the_bound_maximizer():
    pilots = [(0.3, 0.5), (0.6, 0.5), (0.9, 0.5)]
    quantile = tuning_curve(pilots, bound="quantile")
    assert quantile.recommended_acceptance == pytest.approx(0.65, abs=0.02)
    assert quantile.efficiency.max() == pytest.approx(1.0)
    assert tuning_curve(pilots, bound="cdf").recommended_acceptance == pytest.approx(0.99)


def test_rising_correlation_pushes_acceptance_up():
    pilots = [(0.3, 0.0), (0.6, 0.5), (0.95, 0.99)]
    curve = tuning_curve(pilots, kind="control", bound="quantile")
    assert curve.recommended_acceptance > 0.7


def test_tuning_curve_input_errors():
    with pytest.raises(InsufficientDataError):
        tuning_curve([(0.5, 0.1), (0.6, 0.2)])
    with pytest.raises(ContractViolationError):
        tuning_curve([(0.0, 0.1), (0.6, 0.2), (0.7, 0.3)])
    with pytest.raises(ContractViolationError):
        tuning_curve([(0.5, 0.1), (0.5, 0.2), (0.5, 0.3)])


def test_acceptance_range_limits_the_curve():
    pilots = [(0.5, 0.2), (0.7, 0.6), (0.9, 0.9)]
    curve = tuning_curve(pilots, bound="cdf", acceptance_range=(0.5, 0.9))
    assert curve.acceptance[0] == pytest.approx(0.5)
    assert curve.acceptance[-1] == pytest.approx(0.9)
    assert curve.recommended_acceptance == pytest.approx(0.9)
    with pytest.raises(ContractViolationError):
        tuning_curve(pilots, acceptance_range=(0.9, 0.5))
    with pytest.raises(ContractViolationError):
        tuning_curve(pilots, acceptance_range=(0.0, 0.9))


def test_quantile_curve_stays_inside_a_rising_correlation_sweep():
    acceptance = [0.35, 0.55, 0.70, 0.82, 0.90, 0.95, 0.98]
    rho = [0.5, 0.6, 0.7, 0.8, 0.85, 0.87, 0.88]
    measured = efficiency_bound(np.array(acceptance), "quantile") / (1.0 - np.square(rho))
    peak = acceptance[int(np.argmax(measured))]
    curve = tuning_curve(list(zip(acceptance, rho)), bound="quantile", acceptance_range=(0.35, 0.98))
    assert grid_cell_gap(acceptance, curve.recommended_acceptance, peak) <= 1
    cdf = tuning_curve(list(zip(acceptance, rho)), bound="cdf", acceptance_range=(0.35, 0.98))
    assert grid_cell_gap(acceptance, cdf.recommended_acceptance, peak) == 2


def test_grid_cell_gap_counts_rows_by_acceptance():
    rows = [0.9, 0.5, 0.7, 0.95]
    assert grid_cell_gap(rows, 0.99, 0.7) == 2
    assert grid_cell_gap(rows, 0.71, 0.7) == 0
    assert grid_cell_gap(rows, 0.5, 0.95) == 3
    with pytest.raises(InsufficientDataError):
        grid_cell_gap([], 0.5, 0.5)
