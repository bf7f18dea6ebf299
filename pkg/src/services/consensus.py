"""Consensus labels and quality scores from annotator labels plus classifier evidence.

The weighted ensemble scores every class as

    s = classifier_weight * p_classifier + sum_j annotator_weight_j * onehot(m_j),   s /= sum(s)

with chance-corrected agreement weights, takes label = argmax(s) and quality = max(s).
"""
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..errors import ConfigError, ContractError, ShapeError
from ..models.records import ConsensusDataset, ConsensusRecord, MultiRaterDataset
from .data import sample_noisy_labels

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12


def _break_ties(scores: np.ndarray, tiebreak_probs: Optional[np.ndarray]) -> int:
    tied = np.flatnonzero(scores >= scores.max() - TIE_TOLERANCE)
    if len(tied) > 1 and tiebreak_probs is not None:
        preference = np.asarray(tiebreak_probs, dtype=np.float64)[tied]
        tied = tied[preference >= preference.max()]
    return int(tied[0])


def majority_votes(
    annotations: np.ndarray,
    n_classes: int,
    tiebreak_probs: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Row-wise majority vote; ties go to the highest tiebreak probability, else the lowest class index."""
    annotations = np.asarray(annotations, dtype=np.int64)
    if annotations.shape[1] == 0:
        raise ContractError("majority vote needs at least one annotation")
    counts = np.zeros((annotations.shape[0], n_classes))
    np.add.at(counts, (np.arange(annotations.shape[0])[:, None], annotations), 1.0)
    tied = counts == counts.max(axis=1, keepdims=True)
    if tiebreak_probs is None:
        return np.argmax(tied, axis=1)
    preference = np.where(tied, np.asarray(tiebreak_probs, dtype=np.float64), -np.inf)
    return np.argmax(preference, axis=1)


def majority_vote(annotations: Sequence[int], tiebreak_probs: Optional[Sequence[float]] = None) -> int:
    labels = np.asarray(annotations, dtype=np.int64)
    if labels.size == 0:
        raise ContractError("majority vote needs at least one annotation")
    n_classes = len(tiebreak_probs) if tiebreak_probs is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    return _break_ties(counts, tiebreak_probs)


def weighted_consensus(
    classifier_probs: Sequence[float],
    annotations: Sequence[int],
    annotator_weights: Sequence[float],
    classifier_weight: float,
) -> ConsensusRecord:
    probs = np.asarray(classifier_probs, dtype=np.float64)
    labels = np.asarray(annotations, dtype=np.int64)
    weights = np.asarray(annotator_weights, dtype=np.float64)
    if weights.shape != labels.shape:
        raise ShapeError(f"{len(weights)} annotator weights for {len(labels)} annotations")
    if np.any(weights < 0) or classifier_weight < 0:
        raise ConfigError("consensus weights must be nonnegative")
    if weights.sum() + classifier_weight <= 0:
        raise ConfigError("consensus weights are all zero")
    if abs(probs.sum() - 1.0) > 1e-6 or np.any(probs < 0):
        raise ContractError("classifier probabilities must lie on the simplex")

    scores = classifier_weight * probs + np.bincount(labels, weights=weights, minlength=len(probs))
    scores /= scores.sum()
    label = _break_ties(scores, probs)
    return ConsensusRecord(label, float(scores[label]))


def _chance_corrected(agreement: np.ndarray, n_classes: int) -> np.ndarray:
    chance = 1.0 / n_classes
    return np.maximum(0.0, (agreement - chance) / (1.0 - chance))


def estimate_weights(dataset: MultiRaterDataset, classifier_probs: np.ndarray) -> Tuple[np.ndarray, float]:
    """Chance-corrected agreement of each annotator (and the classifier argmax) with the majority vote."""
    if len(dataset) == 0:
        raise ContractError("estimate_weights needs at least one example")
    probs = np.asarray(classifier_probs, dtype=np.float64)
    votes = majority_votes(dataset.annotations, dataset.n_classes, probs)
    annotator_agreement = (dataset.annotations == votes[:, None]).mean(axis=0)
    classifier_agreement = float((np.argmax(probs, axis=1) == votes).mean())
    annotator_weights = _chance_corrected(annotator_agreement, dataset.n_classes)
    classifier_weight = float(_chance_corrected(np.array([classifier_agreement]), dataset.n_classes)[0])
    return annotator_weights, classifier_weight


def build_consensus_dataset(
    dataset: MultiRaterDataset,
    classifier,
    threshold: float = 0.5,
    method: str = "weighted",
    seed: int = 0,
) -> ConsensusDataset:
    if classifier.net.in_dim != dataset.meta.feature_dim:
        raise ShapeError(f"classifier expects {classifier.net.in_dim} features, dataset has {dataset.meta.feature_dim}")
    probs = classifier.predict_proba(dataset.features)
    n = len(dataset)

    if method == "weighted":
        annotator_weights, classifier_weight = estimate_weights(dataset, probs)
        logger.info(
            "consensus weights: annotators=%s classifier=%.4f",
            np.round(annotator_weights, 4).tolist(), classifier_weight,
        )
        labels = np.empty(n, dtype=np.int64)
        quality = np.empty(n)
        for i in range(n):
            record = weighted_consensus(probs[i], dataset.annotations[i], annotator_weights, classifier_weight)
            labels[i], quality[i] = record.label, record.quality
    elif method == "majority":
        labels = majority_votes(dataset.annotations, dataset.n_classes, probs)
        quality = (dataset.annotations == labels[:, None]).mean(axis=1)
    elif method == "random":
        labels = sample_noisy_labels(dataset.annotations, np.random.default_rng(seed))
        quality = np.ones(n)
    else:
        raise ConfigError(f"unknown consensus method '{method}'", key="consensus.method")

    retained = quality > threshold
    if n and not retained.any():
        raise ConfigError(
            f"no example passed the quality filter (> {threshold}); lower consensus.quality_threshold",
            key="consensus.quality_threshold",
        )
    result = ConsensusDataset(dataset, labels, quality, retained, threshold, method)
    logger.info("consensus (%s): retained %d/%d (%.1f%%)", method, len(result), n, 100 * result.retention)
    return result


def consensus_accuracy(consensus: ConsensusDataset, ground_truth: Optional[np.ndarray] = None) -> float:
    truth = consensus.source.require_ground_truth() if ground_truth is None else np.asarray(ground_truth)
    mask = consensus.retained
    if not mask.any():
        return 0.0
    return float((consensus.labels[mask] == truth[mask]).mean())


def save_consensus_csv(consensus: ConsensusDataset, path: Union[str, Path]) -> None:
    frame = pd.DataFrame({
        "index": np.arange(len(consensus.labels)),
        "consensus_label": consensus.labels,
        "alpha": consensus.quality,
        "retained": consensus.retained.astype(int),
    })
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def load_consensus_csv(
    path: Union[str, Path],
    source: MultiRaterDataset,
    threshold: float = 0.5,
    method: str = "weighted",
) -> ConsensusDataset:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != ["index", "consensus_label", "alpha", "retained"]:
        raise ContractError(f"{path}: unexpected consensus columns {list(frame.columns)}")
    if len(frame) != len(source) or not np.array_equal(frame["index"].to_numpy(), np.arange(len(source))):
        raise ContractError(f"{path}: consensus rows do not match the training set")
    return ConsensusDataset(
        source,
        frame["consensus_label"].to_numpy(),
        frame["alpha"].to_numpy(dtype=np.float64),
        frame["retained"].to_numpy().astype(bool),
        threshold,
        method,
    )
