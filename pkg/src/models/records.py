from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractError, ShapeError, StateError

MISSING_LABEL = -1


@dataclass(frozen=True)
class DatasetMeta:
    n_classes: int
    n_annotators: int
    feature_dim: int
    seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.feature_dim) < 1 or self.n_annotators < 0:
            raise ContractError(f"invalid dataset metadata: {self}")


@dataclass(frozen=True)
class MultiRaterExample:
    features: np.ndarray
    annotations: np.ndarray
    ground_truth: Optional[int] = None

    def annotations_onehot(self, n_classes: int) -> np.ndarray:
        return np.eye(n_classes)[self.annotations]


@dataclass
class MultiRaterDataset:
    """Columnar multi-rater dataset: features (N, d), annotations (N, M), ground truth (N,) with -1 for missing."""

    features: np.ndarray
    annotations: np.ndarray
    meta: DatasetMeta
    ground_truth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.annotations = np.asarray(self.annotations, dtype=np.int64)
        n = self.features.shape[0] if self.features.ndim == 2 else -1
        if self.features.ndim != 2 or self.features.shape[1] != self.meta.feature_dim:
            raise ShapeError(f"features {self.features.shape} do not match dim {self.meta.feature_dim}")
        if self.annotations.shape != (n, self.meta.n_annotators):
            raise ShapeError(f"annotations {self.annotations.shape} do not match ({n}, {self.meta.n_annotators})")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features must be finite")
        if self.annotations.size and (self.annotations.min() < 0 or self.annotations.max() >= self.meta.n_classes):
            raise ContractError(f"annotation outside [0, {self.meta.n_classes})")
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=np.int64)
            if self.ground_truth.shape != (n,):
                raise ShapeError(f"ground truth {self.ground_truth.shape} does not match {n} examples")
            if self.ground_truth.size and (
                self.ground_truth.min() < MISSING_LABEL or self.ground_truth.max() >= self.meta.n_classes
            ):
                raise ContractError(f"ground truth outside [0, {self.meta.n_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return self.meta.n_classes

    @property
    def n_annotators(self) -> int:
        return self.meta.n_annotators

    @property
    def has_ground_truth(self) -> bool:
        return self.ground_truth is not None and bool(np.all(self.ground_truth >= 0))

    def require_ground_truth(self) -> np.ndarray:
        if not self.has_ground_truth:
            raise StateError("operation requires ground truth for every example")
        return self.ground_truth

    def example(self, index: int) -> MultiRaterExample:
        gt = None
        if self.ground_truth is not None and self.ground_truth[index] >= 0:
            gt = int(self.ground_truth[index])
        return MultiRaterExample(self.features[index], self.annotations[index], gt)

    def subset(self, indices: Sequence[int]) -> "MultiRaterDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MultiRaterDataset(
            self.features[idx],
            self.annotations[idx],
            self.meta,
            None if self.ground_truth is None else self.ground_truth[idx],
        )

    def with_annotations(self, annotations: np.ndarray) -> "MultiRaterDataset":
        annotations = np.asarray(annotations, dtype=np.int64)
        meta = DatasetMeta(self.meta.n_classes, annotations.shape[1], self.meta.feature_dim, self.meta.seed)
        return MultiRaterDataset(self.features, annotations, meta, self.ground_truth)


@dataclass(frozen=True)
class ConsensusRecord:
    label: int
    quality: float


@dataclass
class ConsensusDataset:
    """Consensus labels for every example of `source`; only `retained` rows take part in training."""

    source: MultiRaterDataset
    labels: np.ndarray
    quality: np.ndarray
    retained: np.ndarray
    threshold: float = 0.5
    method: str = "weighted"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.quality = np.asarray(self.quality, dtype=np.float64)
        self.retained = np.asarray(self.retained, dtype=bool)
        n = len(self.source)
        if self.labels.shape != (n,) or self.quality.shape != (n,) or self.retained.shape != (n,):
            raise ShapeError("consensus arrays must have one entry per example")
        if not np.all(np.isfinite(self.quality)):
            raise ContractError("consensus quality must be finite")
        if np.any(self.quality[self.retained] <= self.threshold):
            raise ContractError(f"retained record with quality <= {self.threshold}")

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.retained)

    @property
    def retention(self) -> float:
        return float(self.retained.mean()) if len(self.retained) else 0.0

    def __len__(self) -> int:
        return int(self.retained.sum())

    @property
    def records(self) -> List[Tuple[MultiRaterExample, ConsensusRecord]]:
        return [
            (self.source.example(i), ConsensusRecord(int(self.labels[i]), float(self.quality[i])))
            for i in self.indices
        ]

    def retained_dataset(self) -> MultiRaterDataset:
        return self.source.subset(self.indices)

    def retained_labels(self) -> np.ndarray:
        return self.labels[self.retained]


@dataclass(frozen=True)
class SelectionSample:
    soft: np.ndarray
    chosen_index: int


@dataclass(frozen=True)
class PredictionRecord:
    index: int
    predicted: int
    chosen_index: int
    correct: bool


@dataclass(frozen=True)
class CoveragePoint:
    lambda_: Optional[float]
    coverage: float
    mean_cost: float
    accuracy: float
    accuracy_std: float = 0.0
    trials: int = 1


@dataclass(frozen=True)
class BaselineRow:
    name: str
    coverage: float
    cost: float
    accuracy: float


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    ce: float
    cost: float
    coverage: float
    lr: float
    accuracy: float = float("nan")


@dataclass(frozen=True)
class PretrainEpoch:
    epoch: int
    loss: float
    heldout_accuracy: float
    kept_fraction: float
    lr: float


@dataclass
class TrainingLog:
    epochs: List[EpochStats] = field(default_factory=list)

    def append(self, stats: EpochStats) -> None:
        self.epochs.append(stats)

    @property
    def final(self) -> EpochStats:
        if not self.epochs:
            raise StateError("training log is empty")
        return self.epochs[-1]
