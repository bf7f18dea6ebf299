"""Coverage, cost and accuracy of trained systems, lambda sweeps, baselines and curve files."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from ..errors import ConfigError, ContractError
from ..models.records import (
    BaselineRow,
    ConsensusDataset,
    CoveragePoint,
    MultiRaterDataset,
    PredictionRecord,
    TrainingLog,
)
from ..models.schemas import LecomhConfig
from .consensus import majority_votes
from .data import sample_noisy_labels
from .lecomh import CollabNet, SelectionNet, assemble_batch, gumbel_softmax, save_system, save_training_log, train_lecomh
from .nnet import one_hot
from .pretrain import Classifier

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["lambda", "coverage", "mean_cost", "accuracy", "accuracy_std", "trials"]
BASELINE_COLUMNS = ["name", "coverage", "cost", "accuracy"]
PREDICTION_COLUMNS = ["index", "predicted", "chosen_index", "correct"]


def pool_majority(dataset: MultiRaterDataset) -> np.ndarray:
    return majority_votes(dataset.annotations, dataset.n_classes)


def resolve_truth(dataset: MultiRaterDataset) -> np.ndarray:
    """Ground truth where present, otherwise the majority vote of the full annotator pool."""
    if dataset.n_annotators == 0:
        return dataset.require_ground_truth()
    majority = pool_majority(dataset)
    if dataset.ground_truth is None:
        return majority
    return np.where(dataset.ground_truth >= 0, dataset.ground_truth, majority)


def evaluate_system(
    selection: SelectionNet,
    collab: CollabNet,
    classifier: Classifier,
    dataset: MultiRaterDataset,
    seed: int,
    temperature: float = 5.0,
    hard: bool = True,
) -> Tuple[List[PredictionRecord], CoveragePoint]:
    """Per example, draw M of the P pool annotators without replacement (random order), pick K and predict.

    Example i draws from `default_rng([seed, i])`: the annotator subset first, then the Gumbel noise.
    """
    n_slots = selection.n_annotators
    pool = dataset.n_annotators
    if pool < n_slots:
        raise ConfigError(f"annotator pool has {pool} members, the system needs {n_slots}")
    n = len(dataset)
    if n == 0:
        raise ContractError("evaluate_system needs at least one example")

    ai_probs = classifier.predict_proba(dataset.features)
    logits = selection.logits(dataset.features)
    chosen = np.empty(n, dtype=np.int64)
    queried = np.empty((n, n_slots), dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        queried[i] = dataset.annotations[i, rng.choice(pool, n_slots, replace=False)]
        if hard:
            chosen[i] = int(np.argmax(logits[i]))
        else:
            chosen[i] = gumbel_softmax(logits[i], temperature, rng).chosen_index

    z = np.eye(n_slots + 1)[chosen]
    inputs = assemble_batch(ai_probs, one_hot(queried, dataset.n_classes), z)
    predicted = np.argmax(collab.predict_proba(inputs), axis=1)
    correct = predicted == resolve_truth(dataset)

    records = [PredictionRecord(i, int(predicted[i]), int(chosen[i]), bool(correct[i])) for i in range(n)]
    summary = CoveragePoint(
        lambda_=None,
        coverage=float(np.count_nonzero(chosen == 0) / n),
        mean_cost=float(chosen.mean()),
        accuracy=float(correct.mean()),
    )
    logger.info(
        "evaluated %d examples (%s selection): coverage=%.3f cost=%.3f accuracy=%.4f",
        n, "hard" if hard else "sampled", summary.coverage, summary.mean_cost, summary.accuracy,
    )
    return records, summary


@dataclass(frozen=True)
class SweepLeg:
    lambda_: float
    trial: int
    seed: int
    summary: CoveragePoint
    log: TrainingLog


def _leg_dir(root: Path, lambda_: float, trial: int) -> Path:
    return root / f"lambda-{lambda_:g}-trial-{trial}"


def sweep_lambda(
    consensus: ConsensusDataset,
    classifier: Classifier,
    test: MultiRaterDataset,
    config: LecomhConfig,
    lambdas: Sequence[float],
    trials: int,
    seed: int,
    workers: int = 1,
    leg_root: Optional[Path] = None,
) -> Tuple[List[CoveragePoint], List[SweepLeg]]:
    """Train and evaluate one system per (lambda, trial); trial t uses seed + t for every lambda."""
    if not lambdas:
        raise ConfigError("at least one lambda is required", key="eval.lambdas")
    if len(set(lambdas)) != len(lambdas):
        raise ConfigError("lambda values must be distinct", key="eval.lambdas")
    if trials < 1:
        raise ConfigError("trials must be positive", key="eval.trials")
    grid = [(lam, t) for lam in sorted(lambdas) for t in range(trials)]

    def run_leg(leg: Tuple[float, int]) -> SweepLeg:
        lam, trial = leg
        leg_seed = seed + trial
        leg_config = config.model_copy(update={"lambda_": lam})
        result = train_lecomh(consensus, classifier, leg_config, leg_seed)
        _, summary = evaluate_system(
            result.selection, result.collab, result.classifier, test, leg_seed, config.temperature, config.hard_eval
        )
        if leg_root is not None:
            directory = _leg_dir(leg_root, lam, trial)
            directory.mkdir(parents=True, exist_ok=True)
            save_system(directory, result.selection, result.collab)
            save_training_log(result.log, directory / "training_log.csv")
        return SweepLeg(lam, trial, leg_seed, summary, result.log)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            legs = list(pool.map(run_leg, grid))
    else:
        legs = [run_leg(leg) for leg in grid]

    points = []
    for lam in sorted(lambdas):
        group = [leg.summary for leg in legs if leg.lambda_ == lam]
        accuracies = np.array([s.accuracy for s in group])
        std = float(np.std(accuracies, ddof=1) / math.sqrt(len(group))) if len(group) > 1 else 0.0
        points.append(CoveragePoint(
            lambda_=float(lam),
            coverage=float(np.mean([s.coverage for s in group])),
            mean_cost=float(np.mean([s.mean_cost for s in group])),
            accuracy=float(accuracies.mean()),
            accuracy_std=std,
            trials=len(group),
        ))
        logger.info("lambda=%g: coverage=%.3f accuracy=%.4f +/- %.4f", lam, points[-1].coverage, points[-1].accuracy, std)
    return points, legs


def baseline_confidence_deferral(
    classifier: Classifier,
    dataset: MultiRaterDataset,
    coverage_targets: Sequence[float],
) -> List[CoveragePoint]:
    """Defer the least confident (1 - q) fraction to the pool majority vote; each deferral costs the pool size."""
    n = len(dataset)
    if n == 0 or dataset.n_annotators == 0:
        raise ContractError("deferral baseline needs examples and an annotator pool")
    probs = classifier.predict_proba(dataset.features)
    ai_predicted = np.argmax(probs, axis=1)
    majority = pool_majority(dataset)
    truth = resolve_truth(dataset)
    order = np.argsort(-(1.0 - probs.max(axis=1)), kind="stable")

    points = []
    for q in coverage_targets:
        if not 0.0 <= q <= 1.0:
            raise ConfigError(f"coverage target {q} outside [0, 1]", key="eval.coverage_targets")
        n_defer = int(math.floor((1.0 - q) * n + 0.5))
        predicted = ai_predicted.copy()
        deferred = order[:n_defer]
        predicted[deferred] = majority[deferred]
        points.append(CoveragePoint(
            lambda_=None,
            coverage=1.0 - n_defer / n,
            mean_cost=n_defer * dataset.n_annotators / n,
            accuracy=float((predicted == truth).mean()),
        ))
    return points


def baselines_simple(dataset: MultiRaterDataset, classifier: Classifier, seed: int) -> List[BaselineRow]:
    truth = resolve_truth(dataset)
    ai = classifier.predict(dataset.features)
    human = sample_noisy_labels(dataset.annotations, np.random.default_rng(seed))
    majority = pool_majority(dataset)
    return [
        BaselineRow("AI", 1.0, 0.0, float((ai == truth).mean())),
        BaselineRow("Human", 0.0, 1.0, float((human == truth).mean())),
        BaselineRow("Majority", 0.0, float(dataset.n_annotators), float((majority == truth).mean())),
    ]


def lambda_coverage_correlation(points: Sequence[CoveragePoint]) -> float:
    lambdas = [p.lambda_ for p in points]
    coverages = [p.coverage for p in points]
    if len(points) < 2 or len(set(lambdas)) < 2 or len(set(coverages)) < 2:
        return float("nan")
    rho, _ = spearmanr(lambdas, coverages)
    return float(rho)


def emit_curve(points: Sequence[CoveragePoint], path: Union[str, Path]) -> None:
    if not points:
        raise ContractError("cannot write an empty curve")
    frame = pd.DataFrame(
        [(p.lambda_, p.coverage, p.mean_cost, p.accuracy, p.accuracy_std, p.trials) for p in points],
        columns=CURVE_COLUMNS,
    ).sort_values("coverage", kind="mergesort")
    frame.to_csv(path, index=False, float_format="%.17g", na_rep="", lineterminator="\n")


def read_curve(path: Union[str, Path]) -> List[CoveragePoint]:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != CURVE_COLUMNS:
        raise ContractError(f"{path}: unexpected curve columns {list(frame.columns)}")
    return [
        CoveragePoint(
            lambda_=None if pd.isna(row["lambda"]) else float(row["lambda"]),
            coverage=float(row["coverage"]),
            mean_cost=float(row["mean_cost"]),
            accuracy=float(row["accuracy"]),
            accuracy_std=float(row["accuracy_std"]),
            trials=int(row["trials"]),
        )
        for _, row in frame.iterrows()
    ]


def emit_baselines(rows: Sequence[BaselineRow], path: Union[str, Path]) -> None:
    frame = pd.DataFrame([(r.name, r.coverage, r.cost, r.accuracy) for r in rows], columns=BASELINE_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def emit_predictions(records: Sequence[PredictionRecord], path: Union[str, Path]) -> None:
    frame = pd.DataFrame(
        [(r.index, r.predicted, r.chosen_index, int(r.correct)) for r in records], columns=PREDICTION_COLUMNS
    )
    frame.to_csv(path, index=False, lineterminator="\n")
