"""Dataset loading, standardization, splits and synthetic generators.

German credit uses the numeric UCI encoding: whitespace-separated integers,
24 feature columns followed by the label (1 = good -> 0, 2 = bad -> 1).
Response data is a CSV of ``student,question,correct`` triplets with 0-based
indices and an optional header row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy.special import expit

from swindle_utils.core_rng import philox_generator
from swindle_utils.errors import ContractViolationError, DatasetParseError, SchemaError
from swindle_utils.targets import GAMMA_RATE, GAMMA_SHAPE, IRT_DELTA_PRIOR_MEAN

logger = logging.getLogger(__name__)

__all__ = [
    "Standardization",
    "TabularDataset",
    "ResponseDataset",
    "SyntheticDataset",
    "load_german_credit",
    "load_irt",
    "train_test_split",
    "synth_dataset",
    "standardize",
    "save_standardized",
    "load_standardized",
]

GERMAN_CREDIT_FEATURES = 24
_DATA_SUB_STREAM = 5
_SPLIT_SUB_STREAM = 6
_STD_FLOOR = 1e-12


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.mean) / self.std

    def invert(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) * self.std + self.mean


def standardize(raw: np.ndarray) -> Standardization:
    """Column mean and population stddev; constant columns keep scale 1."""
    raw = np.asarray(raw, dtype=np.float64)
    std = raw.std(axis=0)
    return Standardization(raw.mean(axis=0), np.where(std > _STD_FLOOR, std, 1.0))


@dataclass
class TabularDataset:
    """Standardized features (no bias column) with binary labels."""

    features: np.ndarray
    labels: np.ndarray
    feature_names: List[str]
    standardization: Standardization
    raw_features: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def design_matrix(self) -> np.ndarray:
        """Standardized features followed by a bias column of ones."""
        return np.hstack([self.features, np.ones((self.num_rows, 1))])

    @classmethod
    def from_raw(
        cls,
        raw: np.ndarray,
        labels: np.ndarray,
        feature_names: Optional[List[str]] = None,
        standardization: Optional[Standardization] = None,
    ) -> "TabularDataset":
        raw = np.asarray(raw, dtype=np.float64)
        names = feature_names or [f"x{j + 1:02d}" for j in range(raw.shape[1])]
        stats = standardization or standardize(raw)
        return cls(stats.apply(raw), np.asarray(labels, dtype=np.float64), names, stats, raw)


@dataclass
class ResponseDataset:
    students: np.ndarray
    questions: np.ndarray
    correct: np.ndarray
    num_students: int
    num_questions: int

    @property
    def num_responses(self) -> int:
        return self.correct.size


@dataclass
class SyntheticDataset:
    dataset: Union[TabularDataset, ResponseDataset]
    true_params: Dict[str, np.ndarray]


def _read_lines(path: Union[str, Path]) -> List[Tuple[int, str]]:
    text = Path(path).read_text(encoding="utf-8")
    return [(n, line.strip()) for n, line in enumerate(text.splitlines(), start=1) if line.strip()]


def load_german_credit(path: Union[str, Path]) -> TabularDataset:
    """Load the numeric German credit file and standardize its 24 covariates."""
    lines = _read_lines(path)
    if not lines:
        raise SchemaError(f"{path} contains no data rows")
    expected = GERMAN_CREDIT_FEATURES + 1
    rows = []
    for line_no, line in lines:
        tokens = line.split()
        if len(tokens) != expected:
            raise SchemaError(f"expected {expected} columns, found {len(tokens)}", line=line_no)
        try:
            rows.append([float(tok) for tok in tokens])
        except ValueError as exc:
            raise DatasetParseError(f"non-numeric value ({exc})", line=line_no) from exc
    data = np.asarray(rows)
    if not np.all(np.isfinite(data)):
        bad = int(np.argmin(np.all(np.isfinite(data), axis=1)))
        raise DatasetParseError("non-finite value", line=lines[bad][0])

    raw_labels = data[:, -1]
    if np.all(np.isin(raw_labels, (1.0, 2.0))):
        labels = raw_labels - 1.0
    elif np.all(np.isin(raw_labels, (0.0, 1.0))):
        labels = raw_labels
    else:
        bad = int(np.argmin(np.isin(raw_labels, (0.0, 1.0, 2.0))))
        raise DatasetParseError(f"label {raw_labels[bad]:g} is not in {{1, 2}}", line=lines[bad][0])
    logger.info("loaded German credit: %d rows, %d covariates", data.shape[0], GERMAN_CREDIT_FEATURES)
    return TabularDataset.from_raw(data[:, :-1], labels)


def _is_header(line: str) -> bool:
    first = line.split(",")[0].strip()
    try:
        int(first)
    except ValueError:
        return True
    return False


def load_irt(
    path: Union[str, Path],
    num_students: Optional[int] = None,
    num_questions: Optional[int] = None,
) -> ResponseDataset:
    """Load ``student,question,correct`` triplets.

    Without explicit counts, S and J are inferred as ``max index + 1`` and every
    index in ``[0, S)`` / ``[0, J)`` must occur.
    """
    lines = _read_lines(path)
    if lines and _is_header(lines[0][1]):
        lines = lines[1:]
    if not lines:
        raise SchemaError(f"{path} contains no response rows")
    triplets = np.empty((len(lines), 3), dtype=np.int64)
    for k, (line_no, line) in enumerate(lines):
        fields = [tok.strip() for tok in line.split(",")]
        if len(fields) != 3:
            raise SchemaError(f"expected 3 fields, found {len(fields)}", line=line_no)
        try:
            triplets[k] = [int(tok) for tok in fields]
        except ValueError as exc:
            raise DatasetParseError(f"non-integer field ({exc})", line=line_no) from exc
        s, j, y = triplets[k]
        if s < 0 or j < 0:
            raise SchemaError("negative student or question index", line=line_no)
        if y not in (0, 1):
            raise SchemaError(f"outcome must be 0 or 1, got {y}", line=line_no)

    students, questions, correct = triplets.T
    pairs = students * (int(questions.max()) + 1) + questions
    _, first, counts = np.unique(pairs, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = np.sort(first[counts > 1])[0]
        # report the second occurrence
        later = np.flatnonzero(pairs == pairs[dup])[1]
        raise SchemaError(
            f"duplicate response for student {students[later]}, question {questions[later]}",
            line=lines[later][0],
        )

    s_count = num_students if num_students is not None else int(students.max()) + 1
    j_count = num_questions if num_questions is not None else int(questions.max()) + 1
    if students.max() >= s_count or questions.max() >= j_count:
        raise SchemaError(f"indices exceed the declared {s_count} students / {j_count} questions")
    if num_students is None and np.unique(students).size != s_count:
        raise SchemaError("student indices are not dense in [0, S)")
    if num_questions is None and np.unique(questions).size != j_count:
        raise SchemaError("question indices are not dense in [0, J)")
    logger.info("loaded responses: %d students, %d questions, %d answers", s_count, j_count, correct.size)
    return ResponseDataset(students, questions, correct.astype(np.float64), s_count, j_count)


def train_test_split(
    ds: TabularDataset, test_fraction: float, seed: int
) -> Tuple[TabularDataset, TabularDataset]:
    """Random disjoint split; both halves are standardized with train statistics."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractViolationError(f"test fraction must lie in (0, 1), got {test_fraction}")
    n = ds.num_rows
    if n < 2:
        raise ContractViolationError("a split needs at least two rows")
    raw = ds.raw_features if ds.raw_features is not None else ds.standardization.invert(ds.features)
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)
    perm = philox_generator(seed, sub_stream=_SPLIT_SUB_STREAM).permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    train = TabularDataset.from_raw(raw[train_idx], ds.labels[train_idx], ds.feature_names)
    test = TabularDataset.from_raw(
        raw[test_idx], ds.labels[test_idx], ds.feature_names, standardization=train.standardization
    )
    return train, test


def synth_dataset(
    kind: str,
    seed: int,
    num_rows: int = 200,
    num_features: int = 5,
    num_students: int = 20,
    num_questions: int = 10,
    response_fraction: float = 1.0,
    weights: Optional[np.ndarray] = None,
) -> SyntheticDataset:
    """Draw a dataset from the generative model of ``kind`` (logistic, sparse, irt).

    ``weights`` overrides the sampled regression weights (bias last) for the
    logistic kind.
    """
    if min(num_rows, num_features, num_students, num_questions) < 1:
        raise ContractViolationError("synthetic dataset sizes must be positive")
    rng = philox_generator(seed, sub_stream=_DATA_SUB_STREAM)
    if kind in ("logistic", "sparse"):
        raw = rng.standard_normal((num_rows, num_features))
        ds = TabularDataset.from_raw(raw, np.zeros(num_rows))
        design = ds.design_matrix()
        if kind == "logistic":
            w = rng.standard_normal(num_features + 1) if weights is None else np.asarray(weights, float)
            if w.shape != (num_features + 1,):
                raise ContractViolationError(f"weights must have length {num_features + 1}")
            params = {"w": w}
            effective = w
        else:
            tau = rng.gamma(GAMMA_SHAPE, 1.0 / GAMMA_RATE)
            lam = rng.gamma(GAMMA_SHAPE, 1.0 / GAMMA_RATE, size=num_features + 1)
            w = rng.standard_normal(num_features + 1)
            effective = tau * w * lam
            params = {"tau": np.asarray(tau), "lambda": lam, "w": w, "beta": effective}
        labels = (rng.random(num_rows) < expit(design @ effective)).astype(np.float64)
        return SyntheticDataset(replace(ds, labels=labels), params)

    if kind == "irt":
        alpha = rng.standard_normal(num_students)
        beta = rng.standard_normal(num_questions)
        delta = IRT_DELTA_PRIOR_MEAN + rng.standard_normal()
        grid_s, grid_j = np.meshgrid(np.arange(num_students), np.arange(num_questions), indexing="ij")
        students, questions = grid_s.ravel(), grid_j.ravel()
        if response_fraction < 1.0:
            keep = rng.random(students.size) < response_fraction
            # every student and question answered at least once keeps indices dense
            keep[np.arange(num_students) * num_questions + np.arange(num_students) % num_questions] = True
            keep[(np.arange(num_questions) % num_students) * num_questions + np.arange(num_questions)] = True
            students, questions = students[keep], questions[keep]
        logits = alpha[students] - beta[questions] + delta
        correct = (rng.random(students.size) < expit(logits)).astype(np.float64)
        ds = ResponseDataset(students, questions, correct, num_students, num_questions)
        return SyntheticDataset(ds, {"alpha": alpha, "beta": beta, "delta": np.asarray(delta)})

    raise ContractViolationError(f"unknown synthetic dataset kind {kind!r}")


class StandardizationDocument(BaseModel):
    feature_names: List[str]
    mean: List[float]
    std: List[float]


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_standardized(ds: TabularDataset, path: Union[str, Path]) -> Path:
    """Write standardized features + labels as CSV and the statistics as a JSON sidecar."""
    path = Path(path)
    frame = pd.DataFrame(ds.features, columns=ds.feature_names)
    frame["label"] = ds.labels.astype(np.int64)
    frame.to_csv(path, index=False, float_format="%.17g")
    doc = StandardizationDocument(
        feature_names=ds.feature_names,
        mean=[float(v) for v in ds.standardization.mean],
        std=[float(v) for v in ds.standardization.std],
    )
    _sidecar(path).write_text(doc.model_dump_json(indent=2), encoding="utf-8")
    return path


def load_standardized(path: Union[str, Path]) -> TabularDataset:
    path = Path(path)
    doc = StandardizationDocument.model_validate_json(_sidecar(path).read_text(encoding="utf-8"))
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [name for name in doc.feature_names + ["label"] if name not in frame.columns]
    if missing:
        raise SchemaError(f"{path} lacks columns {missing}")
    features = frame[doc.feature_names].to_numpy(dtype=np.float64)
    stats = Standardization(np.asarray(doc.mean), np.asarray(doc.std))
    return TabularDataset(
        features=features,
        labels=frame["label"].to_numpy(dtype=np.float64),
        feature_names=list(doc.feature_names),
        standardization=stats,
        raw_features=stats.invert(features),
    )
