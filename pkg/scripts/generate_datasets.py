#!/usr/bin/env python3
"""
Generate synthetic datasets in the formats the loaders read.

Usage:
  python3 scripts/generate_datasets.py [seed] [out_dir]

Outputs to out_dir (default: data/):
  synthetic_credit.data-numeric   German-credit layout, 1000 rows, 24 covariates
  synthetic_irt.csv               student,question,correct triplets
  *.truth.json                    ground-truth parameters of each file
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from swindle_utils.data_io import GERMAN_CREDIT_FEATURES, synth_dataset  # noqa: E402


def write_truth(path: Path, params: dict) -> None:
    doc = {name: np.asarray(value).tolist() for name, value in params.items()}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def write_credit(out_dir: Path, seed: int) -> Path:
    synthetic = synth_dataset("logistic", seed, num_rows=1000, num_features=GERMAN_CREDIT_FEATURES)
    ds = synthetic.dataset
    # integer-valued covariates, labels in the 1 = good / 2 = bad convention
    raw = np.round(ds.raw_features * 10.0).astype(np.int64)
    labels = ds.labels.astype(np.int64) + 1
    path = out_dir / "synthetic_credit.data-numeric"
    lines = [" ".join(str(v) for v in row) + f" {y}" for row, y in zip(raw, labels)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_truth(out_dir / "synthetic_credit.truth.json", synthetic.true_params)
    return path


def write_irt(out_dir: Path, seed: int) -> Path:
    synthetic = synth_dataset("irt", seed, num_students=400, num_questions=100, response_fraction=0.75)
    ds = synthetic.dataset
    path = out_dir / "synthetic_irt.csv"
    rows = ["student,question,correct"]
    rows += [f"{s},{j},{int(y)}" for s, j, y in zip(ds.students, ds.questions, ds.correct)]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_truth(out_dir / "synthetic_irt.truth.json", synthetic.true_params)
    return path


def main() -> None:
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 42
    out_dir = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("data")
    out_dir.mkdir(parents=True, exist_ok=True)

    credit = write_credit(out_dir, seed)
    irt = write_irt(out_dir, seed)
    print(f"✅ Wrote {credit}")
    print(f"✅ Wrote {irt}")


if __name__ == "__main__":
    main()
