"""Synthetic multi-rater datasets, simulated annotators and the `mrdata v1` CSV format."""
import csv
import logging
import math
import re
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit
from sklearn.metrics import confusion_matrix

from ..errors import ConfigError, DataParseError, StateError
from ..models.records import MISSING_LABEL, DatasetMeta, MultiRaterDataset, MultiRaterExample
from ..models.schemas import AnnotatorSpec

logger = logging.getLogger(__name__)

HEADER_PATTERN = re.compile(r"^# mrdata v1 classes=(\d+) annotators=(\d+) dim=(\d+)$")


def gen_blobs(
    n_classes: int,
    dim: int,
    n_train: int,
    n_test: int,
    class_separation: float,
    seed: int,
) -> Tuple[MultiRaterDataset, MultiRaterDataset]:
    """Class-balanced isotropic Gaussian clusters with identity covariance.

    Centers are `class_separation / sqrt(2)` times orthonormal directions, so any two centers are
    `class_separation` apart (random unit directions when dim < n_classes).
    """
    if n_classes < 2 or dim < 2:
        raise ConfigError("gen_blobs needs n_classes >= 2 and dim >= 2")
    if class_separation < 0:
        raise ConfigError(f"class separation must be nonnegative, got {class_separation}", key="class_separation")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((dim, n_classes))
    if dim >= n_classes:
        directions, _ = np.linalg.qr(directions)
    else:
        directions /= np.linalg.norm(directions, axis=0, keepdims=True)
    centers = directions.T * (class_separation / math.sqrt(2.0))

    meta = DatasetMeta(n_classes, 0, dim, seed)

    def draw(n: int) -> MultiRaterDataset:
        labels = rng.permutation(np.arange(n) % n_classes)
        features = centers[labels] + rng.standard_normal((n, dim))
        return MultiRaterDataset(features, np.zeros((n, 0), dtype=np.int64), meta, labels)

    return draw(n_train), draw(n_test)


def confusion_annotator(n_classes: int, accuracy: float) -> AnnotatorSpec:
    off_diagonal = (1.0 - accuracy) / (n_classes - 1)
    matrix = np.full((n_classes, n_classes), off_diagonal)
    np.fill_diagonal(matrix, accuracy)
    return AnnotatorSpec(kind="confusion_matrix", confusion=matrix.tolist())


def idn_annotator(rate: float, projection_seed: int) -> AnnotatorSpec:
    return AnnotatorSpec(kind="instance_dependent", idn_rate=rate, idn_projection_seed=projection_seed)


def annotators_from_config(
    n_classes: int,
    accuracies: Sequence[float],
    idn_rates: Sequence[float],
    seed: int,
) -> List[AnnotatorSpec]:
    specs = [confusion_annotator(n_classes, acc) for acc in accuracies]
    specs += [idn_annotator(rate, seed + 1000 + k) for k, rate in enumerate(idn_rates)]
    return specs


def _sample_rows(matrix: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cumulative = np.cumsum(matrix[labels], axis=1)
    cumulative[:, -1] = 1.0
    u = rng.random(len(labels))
    return np.argmax(u[:, None] < cumulative, axis=1)


def idn_flip_probabilities(score: np.ndarray, rate: float) -> np.ndarray:
    """Flip probabilities `min(1, c * score)` with the scale `c` solved so their mean is exactly `rate`."""
    if rate <= 0.0 or score.size == 0:
        return np.zeros_like(score)
    # the mean of the clipped probabilities is increasing in c and reaches 1 at c = 1 / min(score)
    scale = brentq(lambda c: np.minimum(c * score, 1.0).mean() - rate, 0.0, 1.0 / score.min(), xtol=1e-14)
    return np.minimum(scale * score, 1.0)


def _instance_dependent_labels(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    spec: AnnotatorSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    projection = np.random.default_rng(spec.idn_projection_seed).standard_normal(features.shape[1])
    projection /= np.linalg.norm(projection)
    flip_prob = idn_flip_probabilities(expit(features @ projection), spec.idn_rate)
    flip = rng.random(len(labels)) < flip_prob
    offset = rng.integers(1, n_classes, size=len(labels))
    return np.where(flip, (labels + offset) % n_classes, labels)


def annotate(dataset: MultiRaterDataset, specs: Sequence[AnnotatorSpec], seed: int) -> MultiRaterDataset:
    """Replace the annotations of `dataset` with one simulated label per annotator spec."""
    if not dataset.has_ground_truth:
        raise StateError("annotate requires ground truth")
    labels = dataset.ground_truth
    columns = []
    for j, spec in enumerate(specs):
        rng = np.random.default_rng([seed, j])
        if spec.kind == "confusion_matrix":
            matrix = spec.confusion_matrix()
            if matrix.shape[0] != dataset.n_classes:
                raise ConfigError(f"annotator {j} confusion is {matrix.shape}, dataset has {dataset.n_classes} classes")
            columns.append(_sample_rows(matrix, labels, rng))
        else:
            columns.append(_instance_dependent_labels(dataset.features, labels, dataset.n_classes, spec, rng))
    annotations = np.stack(columns, axis=1) if columns else np.zeros((len(dataset), 0), dtype=np.int64)
    return dataset.with_annotations(annotations)


def annotator_accuracy(dataset: MultiRaterDataset) -> np.ndarray:
    truth = dataset.require_ground_truth()
    return (dataset.annotations == truth[:, None]).mean(axis=0)


def empirical_confusion(dataset: MultiRaterDataset, annotator: int) -> np.ndarray:
    truth = dataset.require_ground_truth()
    counts = confusion_matrix(truth, dataset.annotations[:, annotator], labels=np.arange(dataset.n_classes))
    return _normalize_rows(counts.astype(np.float64))


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / counts.shape[1])
    return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), uniform)


def fit_transition_matrices(
    dataset: MultiRaterDataset,
    reference_labels: np.ndarray,
    smoothing: float = 1.0,
) -> List[np.ndarray]:
    """Per-annotator label-transition matrices P[true, given] estimated against `reference_labels`."""
    reference = np.asarray(reference_labels, dtype=np.int64)
    matrices = []
    for j in range(dataset.n_annotators):
        counts = confusion_matrix(reference, dataset.annotations[:, j], labels=np.arange(dataset.n_classes))
        matrices.append(_normalize_rows(counts.astype(np.float64) + smoothing))
    return matrices


def extend_pool(
    dataset: MultiRaterDataset,
    matrices: Sequence[np.ndarray],
    n_annotators: int,
    seed: int,
    reference_labels: Optional[np.ndarray] = None,
) -> MultiRaterDataset:
    """Grow (or cut) the annotator pool to `n_annotators`, synthesizing new users from the fitted matrices in turn."""
    if n_annotators <= dataset.n_annotators:
        return subset_annotators(dataset, range(n_annotators))
    if not matrices:
        raise ConfigError("extend_pool needs at least one transition matrix")
    reference = dataset.require_ground_truth() if reference_labels is None else np.asarray(reference_labels)
    columns = [dataset.annotations[:, j] for j in range(dataset.n_annotators)]
    for k in range(n_annotators - dataset.n_annotators):
        rng = np.random.default_rng([seed, dataset.n_annotators + k])
        columns.append(_sample_rows(matrices[k % len(matrices)], reference, rng))
    logger.info("extended annotator pool from %d to %d", dataset.n_annotators, n_annotators)
    return dataset.with_annotations(np.stack(columns, axis=1))


def subset_annotators(dataset: MultiRaterDataset, indices: Sequence[int]) -> MultiRaterDataset:
    idx = np.asarray(list(indices), dtype=np.int64)
    return dataset.with_annotations(dataset.annotations[:, idx])


def sample_users(dataset: MultiRaterDataset, n_users: int, seed: int) -> MultiRaterDataset:
    """Keep `n_users` annotations per example, drawn without replacement and independently per row."""
    if not 1 <= n_users <= dataset.n_annotators:
        raise ConfigError(
            f"cannot keep {n_users} users from {dataset.n_annotators} annotators", key="lecomh.n_users"
        )
    rng = np.random.default_rng(seed)
    columns = np.argsort(rng.random((len(dataset), dataset.n_annotators)), axis=1)[:, :n_users]
    return dataset.with_annotations(np.take_along_axis(dataset.annotations, columns, axis=1))


def sample_noisy_label(example: MultiRaterExample, seed: Union[int, np.random.Generator]) -> int:
    rng = np.random.default_rng(seed)
    return int(example.annotations[rng.integers(len(example.annotations))])


def sample_noisy_labels(annotations: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniformly chosen annotation per row."""
    picks = rng.integers(annotations.shape[1], size=annotations.shape[0])
    return annotations[np.arange(annotations.shape[0]), picks]


def save_csv(dataset: MultiRaterDataset, path: Union[str, Path]) -> None:
    d, m = dataset.meta.feature_dim, dataset.n_annotators
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# mrdata v1 classes={dataset.n_classes} annotators={m} dim={d}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(d)] + [f"a{j}" for j in range(m)] + ["gt"])
        for i in range(len(dataset)):
            gt = "" if dataset.ground_truth is None or dataset.ground_truth[i] < 0 else str(dataset.ground_truth[i])
            writer.writerow(
                [format(float(v), ".17g") for v in dataset.features[i]]
                + [str(int(a)) for a in dataset.annotations[i]]
                + [gt]
            )


def load_csv(path: Union[str, Path]) -> MultiRaterDataset:
    with open(path, encoding="utf-8", newline="") as handle:
        lines = handle.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataParseError(path, 1, "empty file")
    match = HEADER_PATTERN.match(lines[0])
    if not match:
        raise DataParseError(path, 1, "expected '# mrdata v1 classes=<C> annotators=<M> dim=<d>'")
    n_classes, m, d = (int(g) for g in match.groups())
    expected_columns = [f"f{i}" for i in range(d)] + [f"a{j}" for j in range(m)] + ["gt"]
    if len(lines) < 2 or lines[1].split(",") != expected_columns:
        raise DataParseError(path, 2, "column header does not match the declared dimensions")

    features, annotations, truth = [], [], []
    for line_no, row in enumerate(csv.reader(lines[2:]), start=3):
        if len(row) != d + m + 1:
            raise DataParseError(path, line_no, f"expected {d + m + 1} fields, found {len(row)}")
        try:
            x = [float(v) for v in row[:d]]
        except ValueError:
            raise DataParseError(path, line_no, "non-numeric feature")
        if not all(math.isfinite(v) for v in x):
            raise DataParseError(path, line_no, "non-finite feature")
        try:
            labels = [int(v) for v in row[d:d + m]]
            gt = MISSING_LABEL if row[-1] == "" else int(row[-1])
        except ValueError:
            raise DataParseError(path, line_no, "class indices must be integers")
        if any(not 0 <= a < n_classes for a in labels) or (row[-1] != "" and not 0 <= gt < n_classes):
            raise DataParseError(path, line_no, f"class index outside [0, {n_classes})")
        features.append(x)
        annotations.append(labels)
        truth.append(gt)

    n = len(features)
    return MultiRaterDataset(
        np.asarray(features, dtype=np.float64).reshape(n, d),
        np.asarray(annotations, dtype=np.int64).reshape(n, m),
        DatasetMeta(n_classes, m, d),
        np.asarray(truth, dtype=np.int64),
    )
