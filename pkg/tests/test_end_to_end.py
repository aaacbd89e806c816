"""Desk-scale runs on the German credit file; set SWINDLES_GERMAN_CREDIT to enable."""

import io
import json

import pandas as pd
import pytest
from rich.console import Console

from main import run

pytestmark = pytest.mark.slow

PROTOCOL = {"num_steps": 1000, "burn_in": 500, "num_chains": 32, "replications": 2, "seed": 3}


def run_experiment(command, body, tmp_path, name):
    config = tmp_path / f"{name}.json"
    config.write_text(json.dumps({"name": name, **PROTOCOL, **body}), encoding="utf-8")
    out = tmp_path / name
    code = run([command, "--config", str(config), "--out", str(out)], Console(file=io.StringIO()))
    return code, out


def credit_target(path):
    return {"kind": "logistic", "dataset": str(path)}


@pytest.fixture(scope="module")
def credit_runs(tmp_path_factory, german_credit_path):
    tmp_path = tmp_path_factory.mktemp("credit")
    hmc = {
        "target": credit_target(german_credit_path),
        "kernel": {"kind": "hmc", "step_size": 0.25, "num_leapfrog_steps": 8},
    }
    rwm = {**hmc, "kernel": {"kind": "rwm", "step_size": 0.35}}
    runs = {}
    for name, body in (("hmc", hmc), ("rwm", rwm)):
        code, out = run_experiment("sample", body, tmp_path, name)
        runs[name] = (code, pd.read_csv(out / "ess_summary.csv").set_index(["functional", "estimator"]))
    return runs


def per_grad(summary, functional, estimator):
    return float(summary.loc[(functional, estimator), "ess_per_grad"])


def test_hmc_swindles_order_on_posterior_mean(credit_runs):
    code, summary = credit_runs["hmc"]
    assert code == 0
    cva = per_grad(summary, "mean", "cva")
    control = per_grad(summary, "mean", "control")
    plain = per_grad(summary, "mean", "plain")
    assert cva >= control > plain


def test_hmc_swindles_beat_random_walk_swindles(credit_runs):
    hmc, rwm = credit_runs["hmc"][1], credit_runs["rwm"][1]
    for estimator in ("control", "cva"):
        assert per_grad(hmc, "mean", estimator) >= 10.0 * per_grad(rwm, "mean", estimator)


def test_variance_functional_gets_little_antithetic_gain(credit_runs):
    summary = credit_runs["hmc"][1]
    plain = per_grad(summary, "variance", "plain")
    assert per_grad(summary, "variance", "antithetic") <= 1.2 * plain
    assert per_grad(summary, "variance", "cva") >= plain


def test_control_predictions_match_long_plain_runs_early(tmp_path, german_credit_path):
    body = {
        "target": credit_target(german_credit_path),
        "kernel": {"kind": "hmc", "step_size": 0.25, "num_leapfrog_steps": 8},
        "estimators": ["plain", "control"],
        "predict": {"test_fraction": 0.1, "split_seed": 0, "budgets": [8, 500]},
    }
    code, out = run_experiment("predict", body, tmp_path, "predict")
    assert code == 0
    table = pd.read_csv(out / "predict_nll.csv").set_index(["budget", "estimator"])["median_nll"]
    long_plain = table[(500, "plain")]
    assert abs(table[(8, "control")] - long_plain) <= 0.01
    assert table[(500, "map")] > long_plain
