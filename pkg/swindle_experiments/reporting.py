"""CSV/JSON writers and console tables for experiment results."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, List

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from swindle_utils.preconditioner import VIFitResult
from swindle_utils.samplers import ChainTrace, CoupledTraces
from swindle_utils.swindles import SwindleEstimateDocument

FLOAT_FORMAT = "%.10g"


def write_table(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_elbo(result: VIFitResult, path: Path) -> Path:
    frame = pd.DataFrame(
        {
            "step": np.arange(result.elbo_trace.size),
            "elbo": result.elbo_trace,
            "elbo_smoothed": result.smoothed_trace,
        }
    )
    return write_table(frame, path)


def write_estimates(documents: Iterable[Dict[str, object]], path: Path) -> Path:
    path.write_text(json.dumps(list(documents), indent=2) + "\n", encoding="utf-8")
    return path


def estimate_record(replication: int, doc: SwindleEstimateDocument) -> Dict[str, object]:
    return {"replication": replication, **doc.model_dump(mode="json")}


def _roles(traces: CoupledTraces) -> List[tuple[str, ChainTrace]]:
    named = [
        ("x_plus", traces.primary),
        ("y_plus", traces.control),
        ("x_minus", traces.antithetic),
        ("y_minus", traces.reflected),
    ]
    return [(name, trace) for name, trace in named if trace is not None]


def write_traces(traces: CoupledTraces, out_dir: Path) -> List[Path]:
    """``traces.csv`` (long format, latent coordinates) and ``traces.npz``."""
    frames = []
    arrays: Dict[str, np.ndarray] = {}
    for role, trace in _roles(traces):
        n, b, d = trace.samples.shape
        steps, chains = np.meshgrid(np.arange(1, n + 1), np.arange(b), indexing="ij")
        frame = pd.DataFrame(trace.samples.reshape(n * b, d), columns=[f"q{j}" for j in range(d)])
        frame.insert(0, "accepted", trace.accepted.reshape(-1).astype(np.int8))
        frame.insert(0, "role", role)
        frame.insert(0, "chain", chains.reshape(-1))
        frame.insert(0, "step", steps.reshape(-1))
        frames.append(frame)
        arrays[f"{role}_samples"] = trace.samples
        arrays[f"{role}_accepted"] = trace.accepted
    csv_path = out_dir / "traces.csv"
    pd.concat(frames, ignore_index=True).to_csv(csv_path, index=False, float_format="%.17g")
    npz_path = out_dir / "traces.npz"
    np.savez(npz_path, center=traces.center, **arrays)
    return [csv_path, npz_path]


def median_summary(frame: pd.DataFrame, keys: List[str], values: List[str]) -> pd.DataFrame:
    """Median over replications and components for every ``keys`` group."""
    return frame.groupby(keys, sort=False)[values].median().reset_index()


def render_table(console: Console, title: str, frame: pd.DataFrame, digits: int = 4) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), justify="right" if frame[column].dtype.kind in "fiu" else "left")
    for row in frame.itertuples(index=False):
        table.add_row(*[f"{v:.{digits}g}" if isinstance(v, float) else str(v) for v in row])
    console.print(table)
