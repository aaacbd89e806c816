"""Experiment driver behind the ``fit``, ``sample``, ``sweep`` and ``predict`` commands."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from rich.console import Console
from scipy.optimize import minimize
from scipy.special import expit

from swindle_experiments import reporting
from swindle_experiments.target_builder import TargetBundle, build_target
from swindle_utils.core_rng import chain_seed
from swindle_utils.diagnostics import (
    coupling_stats,
    ess,
    ess_from_replications,
    grid_cell_gap,
    rhat,
    tuning_curve,
)
from swindle_utils.errors import ConfigError
from swindle_utils.experiment_config import ExperimentConfig
from swindle_utils.integrator import LeapfrogConfig
from swindle_utils.preconditioner import (
    PreconditionedTarget,
    TransportMap,
    identity_map,
    load_or_none,
    precondition,
    run_affine_vi,
)
from swindle_utils.samplers import (
    CoupledTraces,
    CouplingMode,
    KernelConfig,
    KernelKind,
    draw_initial_states,
    run_coupled,
    run_cva,
)
from swindle_utils.swindles import (
    ControlVariateFit,
    EstimatorKind,
    FunctionKind,
    FunctionOfState,
    SwindleEstimate,
    antithetic_estimate,
    control_estimate,
    cva_estimate,
    evaluate_trace,
    fit_for_traces,
    mean_function,
    plain_estimate,
    predictive_function,
    surrogate_expectation,
    variance_function,
)
from swindle_utils.targets import standard_normal

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-12
MAP_GTOL = 1e-6
# sweep cells the tuning curve may sit from the measured optimum
MAX_CELL_GAP = 1
# evaluations of f per retained sample, by estimator
PREDICT_COST = {
    EstimatorKind.PLAIN: 1,
    EstimatorKind.CONTROL: 2,
    EstimatorKind.ANTITHETIC: 2,
    EstimatorKind.CVA: 4,
}
# the closed-form E_Q[f] is billed as one evaluation to estimators that use it
Q_EXPECTATION_COST = {
    EstimatorKind.PLAIN: 0,
    EstimatorKind.CONTROL: 1,
    EstimatorKind.ANTITHETIC: 0,
    EstimatorKind.CVA: 1,
}


@dataclass
class ExperimentContext:
    config: ExperimentConfig
    out_dir: Path
    console: Console = field(default_factory=Console)
    save_traces: bool = False


@dataclass
class CommandResult:
    success: bool
    message: str
    exit_code: int = 0
    outputs: List[Path] = field(default_factory=list)
    stationarity_ok: bool = True


@dataclass
class SamplingSetup:
    bundle: TargetBundle
    transport_map: TransportMap
    latent: PreconditionedTarget
    kernel: KernelConfig


@dataclass
class ReplicationResult:
    estimates: Dict[Tuple[str, EstimatorKind], SwindleEstimate]
    ess_rows: List[Dict[str, object]]
    coupling_rows: List[Dict[str, object]]
    max_rhat: float
    reference_variance: Dict[str, np.ndarray]
    traces: Optional[CoupledTraces] = None


def kernel_config(cfg: ExperimentConfig, leapfrog: Optional[LeapfrogConfig] = None) -> KernelConfig:
    spec = cfg.kernel
    if spec.kind is KernelKind.HMC and leapfrog is None:
        if spec.trajectory_length is not None:
            leapfrog = LeapfrogConfig.from_trajectory_length(spec.trajectory_length, spec.num_leapfrog_steps)
        else:
            leapfrog = LeapfrogConfig(spec.step_size, spec.num_leapfrog_steps)
    return KernelConfig(
        kind=spec.kind,
        num_steps=cfg.num_steps,
        burn_in=cfg.burn_in,
        leapfrog=leapfrog,
        step_size=spec.step_size,
    )


def map_estimate(bundle: TargetBundle) -> np.ndarray:
    """Maximum a posteriori point by BFGS to gradient norm 1e-6."""
    target = bundle.target
    result = minimize(
        target.potential,
        np.zeros(target.dim),
        jac=target.grad_potential,
        method="BFGS",
        options={"gtol": MAP_GTOL, "maxiter": 10_000},
    )
    if not result.success:
        logger.warning("MAP optimization stopped early: %s", result.message)
    return result.x


def heldout_nll(probabilities: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean held-out negative log-likelihood along the last axis."""
    p = np.clip(probabilities, PROB_CLIP, 1.0 - PROB_CLIP)
    return -np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p), axis=-1)


class ExperimentRunner:
    """Runs one experiment config and writes its artifacts to ``context.out_dir``."""

    def __init__(self, context: ExperimentContext):
        self.context = context
        self.config = context.config
        self.console = context.console
        self.out_dir = context.out_dir
        self.out_dir.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------------ fit

    def cmd_fit(self) -> CommandResult:
        bundle = build_target(self.config.target)
        self.console.print(f"🧮 Fitting affine map for {self.config.name} (D={bundle.target.dim})")
        result = run_affine_vi(bundle.target, self.config.preconditioner.vi)
        map_path = self.out_dir / "map.json"
        result.transport_map.save(map_path)
        outputs = [map_path, reporting.write_elbo(result, self.out_dir / "elbo.csv")]
        if self.config.preconditioner.map_path:
            extra = Path(self.config.preconditioner.map_path)
            extra.parent.mkdir(parents=True, exist_ok=True)
            result.transport_map.save(extra)
            outputs.append(extra)
        if not result.improved:
            self.console.print(
                "⚠️  smoothed ELBO decreased during the fit; check the target gradient or raise vi.num_draws"
            )
        self.console.print(
            f"✅ ELBO {result.smoothed_trace[0]:.3f} -> {result.smoothed_trace[-1]:.3f}; map written to {map_path}"
        )
        return CommandResult(True, f"map written to {map_path}", outputs=outputs)

    # -------------------------------------------------------------- helpers

    def _transport_map(self, bundle: TargetBundle) -> TransportMap:
        spec = self.config.preconditioner
        if not spec.enabled:
            return identity_map(bundle.target.dim)
        loaded = load_or_none(spec.map_path)
        if loaded is not None:
            if loaded.dim != bundle.target.dim:
                raise ConfigError(
                    f"map {spec.map_path} has dimension {loaded.dim}, target has {bundle.target.dim}"
                )
            logger.info("using transport map from %s", spec.map_path)
            return loaded
        self.console.print("🧮 No fitted map found; running affine VI first")
        return run_affine_vi(bundle.target, spec.vi).transport_map

    def _setup(self, split: bool = False, leapfrog: Optional[LeapfrogConfig] = None) -> SamplingSetup:
        kernel = kernel_config(self.config, leapfrog)
        bundle = build_target(self.config.target, self.config.predict if split else None)
        transport_map = self._transport_map(bundle)
        return SamplingSetup(bundle, transport_map, precondition(bundle.target, transport_map), kernel)

    def _functionals(self, setup: SamplingSetup) -> List[FunctionOfState]:
        dim = setup.latent.dim
        out = []
        for kind in self.config.functionals:
            if kind is FunctionKind.MEAN:
                out.append(mean_function(dim))
            elif kind is FunctionKind.VARIANCE:
                out.append(variance_function(setup.transport_map.shift))
            else:
                if not setup.bundle.is_tabular:
                    raise ConfigError("the predictive functional needs a tabular target")
                data = setup.bundle.test or setup.bundle.dataset
                rows = data.design_matrix()[: min(10, data.num_rows)]
                out.append(predictive_function(rows, setup.bundle.weights_fn))
        return out

    def _replication_seed(self, replication: int) -> int:
        return chain_seed(self.config.seed, 1_000_000 + replication)

    def _run_group(self, setup: SamplingSetup, seed: int, kernel: Optional[KernelConfig] = None) -> CoupledTraces:
        kernel = kernel or setup.kernel
        dim = setup.latent.dim
        x0 = draw_initial_states(self.config.num_chains, dim, seed)
        surrogate = setup.latent.surrogate()
        return run_cva(setup.latent, surrogate, x0, -x0, x0, kernel, seed)

    def _bill(self, kind: EstimatorKind, traces: CoupledTraces) -> Tuple[int, int]:
        """Target and surrogate evaluations consumed by one estimator."""
        target = traces.primary.cost_evals
        if kind in (EstimatorKind.ANTITHETIC, EstimatorKind.CVA):
            target += traces.antithetic.cost_evals
        surrogate = traces.control.cost_evals if kind in (EstimatorKind.CONTROL, EstimatorKind.CVA) else 0
        return target, surrogate

    # --------------------------------------------------------------- sample

    def _replication(
        self,
        setup: SamplingSetup,
        functionals: List[FunctionOfState],
        expectations: Dict[str, object],
        replication: int,
    ) -> ReplicationResult:
        traces = self._run_group(setup, self._replication_seed(replication))
        tmap = setup.transport_map
        estimates: Dict[Tuple[str, EstimatorKind], SwindleEstimate] = {}
        ess_rows: List[Dict[str, object]] = []
        coupling_rows: List[Dict[str, object]] = []
        max_rhat = 0.0
        references: Dict[str, np.ndarray] = {}
        for f in functionals:
            fx = evaluate_trace(f, traces.primary, tmap)
            chains_fx = np.swapaxes(fx, 0, 1)
            max_rhat = max(max_rhat, float(np.max(rhat(chains_fx))))
            reference = fx.reshape(-1, f.num_outputs).var(axis=0, ddof=1)
            references[f.name] = reference
            fit = fit_for_traces(traces, f, expectations[f.name], tmap, self.config.diagonal_beta)
            for kind in self.config.estimators:
                estimate = self._estimate(kind, traces, f, fit, tmap)
                target_evals, surrogate_evals = self._bill(kind, traces)
                report = ess(
                    np.swapaxes(estimate.chain, 0, 1),
                    reference_variance=None if kind is EstimatorKind.PLAIN else reference,
                )
                estimate.ess = report.ess
                estimates[(f.name, kind)] = estimate
                cost = target_evals + self.config.surrogate_cost * surrogate_evals
                rho = estimate.rho if estimate.rho is not None else np.full(f.num_outputs, np.nan)
                for j in range(f.num_outputs):
                    ess_rows.append(
                        {
                            "replication": replication,
                            "functional": f.name,
                            "estimator": kind.value,
                            "component": j,
                            "estimate": estimate.estimates[j],
                            "ess": report.ess[j],
                            "target_grads": target_evals,
                            "surrogate_grads": surrogate_evals,
                            "ess_per_grad": report.ess[j] / target_evals,
                            "ess_per_cost": report.ess[j] / cost,
                            "rho": rho[j],
                            "vr_factor": estimate.vr_factor[j],
                        }
                    )
            for partner, view in (
                ("control", replace(traces, antithetic=None, reflected=None)),
                ("antithetic", replace(traces, control=None, reflected=None)),
            ):
                stats = coupling_stats(view, f, tmap)
                for j in range(f.num_outputs):
                    coupling_rows.append(
                        {
                            "replication": replication,
                            "functional": f.name,
                            "partner": partner,
                            "component": j,
                            "rho": stats.rho[j],
                            "acceptance": stats.acceptance,
                            "partner_acceptance": stats.partner_acceptance,
                            "decoupling_rate": stats.decoupling_rate,
                            "joint_rejection_rate": stats.joint_rejection_rate,
                            "contraction_rate": stats.contraction_rate,
                        }
                    )
        keep = traces if (self.context.save_traces and replication == 0) else None
        return ReplicationResult(estimates, ess_rows, coupling_rows, max_rhat, references, keep)

    @staticmethod
    def _estimate(
        kind: EstimatorKind,
        traces: CoupledTraces,
        f: FunctionOfState,
        fit: ControlVariateFit,
        tmap: TransportMap,
    ) -> SwindleEstimate:
        if kind is EstimatorKind.PLAIN:
            return plain_estimate(traces, f, tmap)
        if kind is EstimatorKind.CONTROL:
            return control_estimate(traces, f, fit, tmap)
        if kind is EstimatorKind.ANTITHETIC:
            return antithetic_estimate(traces, f, tmap)
        return cva_estimate(traces, f, fit, tmap)

    def _expectations(self, setup: SamplingSetup, functionals: List[FunctionOfState]) -> Dict[str, object]:
        surrogate = standard_normal(setup.latent.dim)
        return {
            f.name: surrogate_expectation(
                surrogate, setup.transport_map, f, self.config.surrogate_budget, seed=self.config.seed
            )
            for f in functionals
        }

    def _run_replications(self, job, count: int) -> list:
        """Run ``job(r)`` for every replication; results come back in replication order."""
        slots: list = [None] * count
        if self.config.workers == 1:
            for r in range(count):
                self.console.print(f"🧪 Running replication {r + 1}/{count}")
                slots[r] = job(r)
            return slots
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            futures = {r: pool.submit(job, r) for r in range(count)}
            for r, future in futures.items():
                slots[r] = future.result()
                self.console.print(f"🧪 Finished replication {r + 1}/{count}")
        return slots

    def cmd_sample(self) -> CommandResult:
        setup = self._setup()
        functionals = self._functionals(setup)
        expectations = self._expectations(setup, functionals)
        self._even_function_caveat(functionals)
        results: List[ReplicationResult] = self._run_replications(
            lambda r: self._replication(setup, functionals, expectations, r), self.config.replications
        )

        ess_frame = pd.DataFrame([row for res in results for row in res.ess_rows])
        coupling_frame = pd.DataFrame([row for res in results for row in res.coupling_rows])
        outputs = [self.out_dir / "ess_table.csv", self.out_dir / "coupling_stats.csv"]
        reporting.write_table(ess_frame, outputs[0])
        reporting.write_table(coupling_frame, outputs[1])

        summary = reporting.median_summary(
            ess_frame, ["functional", "estimator"], ["ess", "ess_per_grad", "ess_per_cost", "vr_factor"]
        )
        summary["replication_ess"] = self._replication_ess(results, functionals)
        outputs.append(self.out_dir / "ess_summary.csv")
        reporting.write_table(summary, outputs[-1])

        docs = [
            reporting.estimate_record(r, est.to_document())
            for r, res in enumerate(results)
            for est in res.estimates.values()
        ]
        outputs.append(reporting.write_estimates(docs, self.out_dir / "estimates.json"))
        if self.context.save_traces and results[0].traces is not None:
            outputs.extend(reporting.write_traces(results[0].traces, self.out_dir))

        reporting.render_table(
            self.console, f"Median ESS over {self.config.replications} replications", summary
        )
        worst = max(res.max_rhat for res in results)
        if worst >= self.config.rhat_threshold:
            self.console.print(
                f"⚠️  stationarity gate failed: max R-hat {worst:.4f} >= {self.config.rhat_threshold}"
            )
            return CommandResult(True, "results written with stationarity warning", 3, outputs, False)
        self.console.print(f"✅ All R-hat < {self.config.rhat_threshold} (max {worst:.4f})")
        return CommandResult(True, f"results written to {self.out_dir}", outputs=outputs)

    def _replication_ess(self, results: List[ReplicationResult], functionals: List[FunctionOfState]) -> List[float]:
        """Median across-replication ESS for each (functional, estimator) summary row."""
        values = []
        draws = self.config.num_chains * (self.config.num_steps - self.config.burn_in)
        for f in functionals:
            plain_var = np.mean([res.reference_variance[f.name] for res in results], axis=0)
            for kind in self.config.estimators:
                if len(results) < 2:
                    values.append(float("nan"))
                    continue
                est = np.array([res.estimates[(f.name, kind)].estimates for res in results])
                values.append(float(np.median(ess_from_replications(est, plain_var, draws))))
        return values

    def _even_function_caveat(self, functionals: List[FunctionOfState]) -> None:
        antithetic = {EstimatorKind.ANTITHETIC, EstimatorKind.CVA} & set(self.config.estimators)
        if antithetic and any(f.is_even_about_center for f in functionals):
            self.console.print(
                "⚠️  the variance functional is even about the symmetry center; "
                "antithetic averaging gives little benefit for it"
            )

    # ---------------------------------------------------------------- sweep

    def _sweep_grid(self) -> List[LeapfrogConfig]:
        spec = self.config.sweep
        if spec.step_sizes:
            steps = [int(round(spec.trajectory_length / eps)) for eps in spec.step_sizes]
        else:
            steps = list(spec.leapfrog_steps)
        if not steps:
            raise ConfigError("sweep grid is empty")
        bad = [s for s in steps if s < 1]
        if bad:
            raise ConfigError(f"sweep grid yields fewer than one leapfrog step: {bad}")
        return [LeapfrogConfig.from_trajectory_length(spec.trajectory_length, s) for s in steps]

    def _sweep_point(self, setup: SamplingSetup, leapfrog: LeapfrogConfig, replication: int) -> Dict[str, float]:
        spec = self.config.sweep
        kernel = replace(setup.kernel, kind=KernelKind.HMC, leapfrog=leapfrog)
        seed = self._replication_seed(replication)
        x0 = draw_initial_states(self.config.num_chains, setup.latent.dim, seed)
        f = mean_function(setup.latent.dim)
        tmap = setup.transport_map
        if spec.estimator == "control":
            traces = run_coupled(
                setup.latent, setup.latent.surrogate(), x0, x0, CouplingMode.SHARED, kernel, seed
            )
            expectation = surrogate_expectation(
                standard_normal(setup.latent.dim), tmap, f, self.config.surrogate_budget
            )
            estimate = control_estimate(traces, f, fit_for_traces(traces, f, expectation, tmap), tmap)
            partner = traces.control
        else:
            traces = run_coupled(setup.latent, setup.latent, x0, -x0, CouplingMode.ANTITHETIC, kernel, seed)
            estimate = antithetic_estimate(traces, f, tmap)
            partner = traces.antithetic
        plain = plain_estimate(traces, f, tmap)
        plain_ess = ess(np.swapaxes(plain.chain, 0, 1)).ess
        reference = plain.chain.reshape(-1, f.num_outputs).var(axis=0, ddof=1)
        swindle_ess = ess(np.swapaxes(estimate.chain, 0, 1), reference_variance=reference).ess
        stats = coupling_stats(traces, f, tmap)
        swindle_grads = traces.primary.cost_evals + (partner.cost_evals if spec.estimator == "antithetic" else 0)
        return {
            "acceptance": stats.acceptance,
            "rho": float(np.nanmedian(stats.rho)),
            "decoupling_rate": stats.decoupling_rate,
            "plain_ess_per_grad": float(np.median(plain_ess)) / traces.primary.cost_evals,
            "swindle_ess_per_grad": float(np.median(swindle_ess)) / swindle_grads,
        }

    def cmd_sweep(self) -> CommandResult:
        grid = self._sweep_grid()
        setup = self._setup()
        rows = []
        for leapfrog in grid:
            self.console.print(f"🔁 ε={leapfrog.step_size:.4g}, L={leapfrog.num_steps}")
            points = self._run_replications(
                lambda r, lf=leapfrog: self._sweep_point(setup, lf, r), self.config.replications
            )
            frame = pd.DataFrame(points)
            rows.append(
                {
                    "step_size": leapfrog.step_size,
                    "num_leapfrog_steps": leapfrog.num_steps,
                    **frame.median().to_dict(),
                }
            )
        table = pd.DataFrame(rows)
        acceptance = table["acceptance"].to_numpy()
        table["plain_best_acceptance"] = float(acceptance[int(np.nanargmax(table["plain_ess_per_grad"].to_numpy()))])
        empirical_best = float(acceptance[int(np.nanargmax(table["swindle_ess_per_grad"].to_numpy()))])
        table["empirical_best_acceptance"] = empirical_best
        table["predicted_efficiency"] = np.nan
        table["curve_acceptance"] = np.nan
        table["recommendation_cell_gap"] = np.nan
        table["recommended_acceptance"] = empirical_best
        distinct = np.unique(np.round(acceptance, 12)).size
        if len(table) >= 3 and distinct >= 2 and np.all((acceptance > 0) & (acceptance < 1)):
            curve = tuning_curve(
                list(zip(acceptance, table["rho"])),
                kind=self.config.sweep.estimator,
                bound=self.config.sweep.bound,
                acceptance_range=(float(acceptance.min()), float(acceptance.max())),
            )
            gap = grid_cell_gap(acceptance, curve.recommended_acceptance, empirical_best)
            table["predicted_efficiency"] = np.interp(acceptance, curve.acceptance, curve.efficiency)
            table["curve_acceptance"] = curve.recommended_acceptance
            table["recommendation_cell_gap"] = gap
            if gap > MAX_CELL_GAP:
                self.console.print(
                    f"⚠️  tuning-curve optimum {curve.recommended_acceptance:.3f} is {gap} grid cells "
                    "from the measured optimum; recommending the measured acceptance"
                )
            else:
                table["recommended_acceptance"] = curve.recommended_acceptance
        else:
            self.console.print("ℹ️  Not enough distinct pilot points for a tuning curve; using the measured optimum")
        self.console.print(
            f"🎯 Recommended acceptance probability: {float(table['recommended_acceptance'].iloc[0]):.3f} "
            f"(measured optimum {empirical_best:.3f})"
        )
        path = reporting.write_table(table, self.out_dir / "sweep.csv")
        reporting.render_table(self.console, "Step-size sweep (medians)", table)
        return CommandResult(True, f"sweep written to {path}", outputs=[path])

    # -------------------------------------------------------------- predict

    def _predict_replication(
        self, setup: SamplingSetup, f: FunctionOfState, expectation, replication: int
    ) -> Dict[EstimatorKind, np.ndarray]:
        traces = self._run_group(setup, self._replication_seed(replication))
        fit = fit_for_traces(traces, f, expectation, setup.transport_map, self.config.diagonal_beta)
        return {kind: self._estimate(kind, traces, f, fit, setup.transport_map).chain for kind in self.config.estimators}

    def cmd_predict(self) -> CommandResult:
        if self.config.target.kind not in ("logistic", "sparse_logistic"):
            raise ConfigError("predict needs a logistic-regression target with a train/test split")
        setup = self._setup(split=True)
        bundle = setup.bundle
        test_design = bundle.test.design_matrix()
        labels = bundle.test.labels
        w_map = map_estimate(bundle)
        map_nll = float(heldout_nll(expit(bundle.weights_fn(w_map) @ test_design.T), labels))
        self.console.print(f"📍 MAP test NLL {map_nll:.4f}")

        f = predictive_function(test_design, bundle.weights_fn)
        expectation = surrogate_expectation(
            standard_normal(setup.latent.dim), setup.transport_map, f, self.config.surrogate_budget,
            seed=self.config.seed,
        )
        chains = self._run_replications(
            lambda r: self._predict_replication(setup, f, expectation, r), self.config.replications
        )
        kept = self.config.num_steps - self.config.burn_in
        rows = []
        for budget in self.config.predict.budgets:
            rows.append(
                {"budget": budget, "estimator": "map", "num_samples": 0, "q_expectation_evals": 0, "median_nll": map_nll}
            )
            for kind in self.config.estimators:
                overhead = Q_EXPECTATION_COST[kind]
                samples = min(max(budget - overhead, 0) // PREDICT_COST[kind], kept)
                if samples < 1:
                    continue
                nll = np.concatenate(
                    [heldout_nll(chain[:samples].mean(axis=0), labels) for chain in (c[kind] for c in chains)]
                )
                rows.append(
                    {
                        "budget": budget,
                        "estimator": kind.value,
                        "num_samples": samples,
                        "q_expectation_evals": overhead,
                        "median_nll": float(np.median(nll)),
                    }
                )
        path = self.out_dir / "predict_nll.csv"
        table = pd.DataFrame(rows)
        reporting.write_table(table, path)
        reporting.render_table(self.console, "Held-out NLL by evaluation budget", table)
        return CommandResult(True, f"predictions written to {path}", outputs=[path])
