from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Union

import numpy as np
from scipy.linalg import cholesky

from swindle_utils.data_io import (
    ResponseDataset,
    TabularDataset,
    load_german_credit,
    load_irt,
    synth_dataset,
    train_test_split,
)
from swindle_utils.errors import ConfigError
from swindle_utils.experiment_config import PredictSpec, TargetSpec
from swindle_utils.targets import (
    GaussianDensity,
    ItemResponseDensity,
    LogisticRegressionDensity,
    SparseLogisticRegressionDensity,
    TargetDensity,
)

logger = logging.getLogger(__name__)


@dataclass
class TargetBundle:
    """A target plus whatever data it was built from."""

    target: TargetDensity
    dataset: Optional[Union[TabularDataset, ResponseDataset]] = None
    test: Optional[TabularDataset] = None
    true_params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def is_tabular(self) -> bool:
        return isinstance(self.dataset, TabularDataset)

    @property
    def weights_fn(self) -> Callable[[np.ndarray], np.ndarray]:
        """Maps a parameter-space state to logistic-regression weights."""
        if isinstance(self.target, SparseLogisticRegressionDensity):
            return self.target.effective_weights
        return lambda x: x


def gaussian_target(spec: TargetSpec) -> GaussianDensity:
    d = spec.dim
    mean = np.zeros(d) if spec.mean is None else np.asarray(spec.mean, dtype=np.float64)
    scales = np.ones(d) if spec.scales is None else np.asarray(spec.scales, dtype=np.float64)
    lags = np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    cov = np.outer(scales, scales) * spec.correlation ** lags
    return GaussianDensity(mean, cholesky(cov, lower=True))


def _dataset_path(spec: TargetSpec) -> Path:
    path = Path(spec.dataset)
    if not path.exists():
        raise ConfigError(f"dataset {path} does not exist")
    return path


def _tabular(spec: TargetSpec) -> tuple[TabularDataset, Dict[str, np.ndarray]]:
    if spec.dataset is not None:
        return load_german_credit(_dataset_path(spec)), {}
    synth = spec.synthetic
    expected = "sparse" if spec.kind == "sparse_logistic" else "logistic"
    if synth.kind != expected:
        raise ConfigError(f"target {spec.kind!r} needs a synthetic spec of kind {expected!r}")
    generated = synth_dataset(
        synth.kind, synth.seed, num_rows=synth.num_rows, num_features=synth.num_features
    )
    return generated.dataset, generated.true_params


def build_target(spec: TargetSpec, split: Optional[PredictSpec] = None) -> TargetBundle:
    """Resolve a target spec; with ``split`` tabular data is divided into train/test first."""
    if spec.kind == "gaussian":
        if split is not None:
            raise ConfigError("a train/test split needs a tabular target")
        target = gaussian_target(spec)
        return TargetBundle(target, true_params={"mean": target.mean, "covariance": target.covariance})

    if spec.kind == "irt":
        if split is not None:
            raise ConfigError("a train/test split needs a tabular target")
        if spec.dataset is not None:
            responses, truth = load_irt(_dataset_path(spec)), {}
        else:
            synth = spec.synthetic
            if synth.kind != "irt":
                raise ConfigError("target 'irt' needs a synthetic spec of kind 'irt'")
            generated = synth_dataset(
                "irt",
                synth.seed,
                num_students=synth.num_students,
                num_questions=synth.num_questions,
                response_fraction=synth.response_fraction,
            )
            responses, truth = generated.dataset, generated.true_params
        target = ItemResponseDensity(
            responses.students,
            responses.questions,
            responses.correct,
            responses.num_students,
            responses.num_questions,
        )
        return TargetBundle(target, responses, true_params=truth)

    dataset, truth = _tabular(spec)
    test = None
    if split is not None:
        dataset, test = train_test_split(dataset, split.test_fraction, split.split_seed)
        logger.info("split %d rows into %d train / %d test", dataset.num_rows + test.num_rows,
                    dataset.num_rows, test.num_rows)
    density_cls = SparseLogisticRegressionDensity if spec.kind == "sparse_logistic" else LogisticRegressionDensity
    target = density_cls(dataset.design_matrix(), dataset.labels)
    return TargetBundle(target, dataset, test, truth)
