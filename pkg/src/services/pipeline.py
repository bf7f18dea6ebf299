"""End-to-end experiment runs: data -> pretrain -> consensus -> train -> eval -> sweep, one directory per run."""
import dataclasses
import hashlib
import json
import logging
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pydantic
import scipy
import sklearn

from ..config import config_hash, serialize_config
from ..errors import ConfigError, LecomhError, OutputExistsError, StageError
from ..models.records import ConsensusDataset, CoveragePoint, MultiRaterDataset
from ..models.schemas import RunConfig
from .consensus import build_consensus_dataset, consensus_accuracy, load_consensus_csv, save_consensus_csv
from .data import (
    annotate,
    annotators_from_config,
    extend_pool,
    fit_transition_matrices,
    gen_blobs,
    load_csv,
    sample_users,
    save_csv,
)
from .evaluation import (
    baseline_confidence_deferral,
    baselines_simple,
    emit_baselines,
    emit_curve,
    emit_predictions,
    evaluate_system,
    lambda_coverage_correlation,
    read_curve,
    resolve_truth,
    sweep_lambda,
)
from .lecomh import load_system, save_system, save_training_log, train_lecomh
from .pretrain import Classifier, evaluate_classifier, load_classifier, pretrain_classifier, save_classifier, save_history

logger = logging.getLogger(__name__)

STAGES = ("data", "pretrain", "consensus", "train", "eval", "sweep")
CURVES = {"lecomh": "curve_lecomh.csv", "deferral": "curve_deferral.csv"}
REFERENCE_NOTE = (
    "published reference, not reproduced at this scale: LECOMH 98.77% accuracy at 50% coverage on CIFAR-10H\n"
)


def generate_datasets(config: RunConfig) -> Tuple[MultiRaterDataset, MultiRaterDataset]:
    data = config.data
    if data.train_csv:
        if not data.test_csv:
            raise ConfigError("test_csv is required together with train_csv", key="data.test_csv")
        train, test = load_csv(data.train_csv), load_csv(data.test_csv)
    else:
        train, test = gen_blobs(
            data.n_classes, data.dim, data.n_train, data.n_test, data.class_separation, config.seed
        )
        specs = annotators_from_config(data.n_classes, data.annotator_accuracies, data.idn_rates, config.seed)
        train = annotate(train, specs, config.seed)
        test = annotate(test, specs, config.seed + 1)

    if data.test_pool_size and data.test_pool_size != test.n_annotators:
        matrices = fit_transition_matrices(train, resolve_truth(train))
        test = extend_pool(test, matrices, data.test_pool_size, config.seed + 2, resolve_truth(test))
    logger.info(
        "datasets: train %d x %d annotators, test %d x %d pool",
        len(train), train.n_annotators, len(test), test.n_annotators,
    )
    return train, test


def cmd_gen_data(config: RunConfig, out_dir: Union[str, Path], force: bool = False) -> List[Path]:
    out_dir = Path(out_dir)
    paths = [out_dir / "train.csv", out_dir / "test.csv"]
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise OutputExistsError(f"{existing[0]} exists; pass --force to overwrite")
    train, test = generate_datasets(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_csv(train, paths[0])
    save_csv(test, paths[1])
    return paths


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def create_run_dir(config: RunConfig, root: Union[str, Path], force: bool = False) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    run_dir = Path(root) / f"{stamp}-{config_hash(config)[:8]}"
    if run_dir.exists() and not force:
        raise OutputExistsError(f"{run_dir} exists; pass --force to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.conf").write_text(serialize_config(config), encoding="utf-8", newline="\n")
    return run_dir


def latest_run_dir(config: RunConfig, root: Union[str, Path]) -> Optional[Path]:
    candidates = sorted(Path(root).glob(f"*-{config_hash(config)[:8]}"))
    return candidates[-1] if candidates else None


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ExperimentPipeline:

    def __init__(self, config: RunConfig, run_dir: Union[str, Path]):
        self.config = config
        self.run_dir = Path(run_dir)
        self.started_at = _now()
        self._datasets: Optional[Tuple[MultiRaterDataset, MultiRaterDataset]] = None
        self._classifier: Optional[Classifier] = None

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def run(self, start: str = "data", stop: Optional[str] = None) -> Path:
        if start not in STAGES or (stop is not None and stop not in STAGES):
            raise ConfigError(f"unknown stage; expected one of {', '.join(STAGES)}", key="--stage")
        first = STAGES.index(start)
        last = STAGES.index(stop) if stop else len(STAGES) - 1
        for stage in STAGES[first:last + 1]:
            logger.info("stage %s: starting in %s", stage, self.run_dir)
            try:
                getattr(self, f"stage_{stage}")()
            except (LecomhError, OSError, ValueError, ArithmeticError) as exc:
                raise StageError(stage, exc) from exc
            logger.info("stage %s: done", stage)
        self.write_manifest()
        return self.run_dir

    # artifacts of earlier stages, loaded lazily when resuming

    @property
    def datasets(self) -> Tuple[MultiRaterDataset, MultiRaterDataset]:
        if self._datasets is None:
            self._datasets = (load_csv(self.path("data", "train.csv")), load_csv(self.path("data", "test.csv")))
        return self._datasets

    @property
    def classifier(self) -> Classifier:
        if self._classifier is None:
            self._classifier = load_classifier(self.path("classifier.weights"))
        return self._classifier

    def consensus(self) -> ConsensusDataset:
        """Consensus over every annotator; with `lecomh.n_users` set, training sees only that many per example."""
        consensus = load_consensus_csv(
            self.path("consensus.csv"),
            self.datasets[0],
            self.config.consensus.quality_threshold,
            self.config.consensus.method,
        )
        n_users = self.config.lecomh.n_users
        if n_users is None or n_users == consensus.source.n_annotators:
            return consensus
        logger.info("training with %d of %d users per example", n_users, consensus.source.n_annotators)
        return dataclasses.replace(consensus, source=sample_users(consensus.source, n_users, self.config.seed))

    def stage_data(self):
        train, test = generate_datasets(self.config)
        self.path("data").mkdir(parents=True, exist_ok=True)
        save_csv(train, self.path("data", "train.csv"))
        save_csv(test, self.path("data", "test.csv"))
        self._datasets = (train, test)

    def stage_pretrain(self):
        train, test = self.datasets
        classifier = pretrain_classifier(train, self.config.pretrain, self.config.seed)
        save_classifier(classifier, self.path("classifier.weights"), config_hash(self.config))
        save_history(classifier, self.path("pretrain_log.csv"))
        if test.has_ground_truth:
            logger.info("classifier test accuracy %.4f", evaluate_classifier(classifier, test))
        self._classifier = classifier

    def stage_consensus(self):
        train, _ = self.datasets
        cfg = self.config.consensus
        consensus = build_consensus_dataset(train, self.classifier, cfg.quality_threshold, cfg.method, self.config.seed)
        save_consensus_csv(consensus, self.path("consensus.csv"))
        if train.has_ground_truth:
            logger.info("consensus accuracy on retained examples %.4f", consensus_accuracy(consensus))

    def stage_train(self):
        result = train_lecomh(self.consensus(), self.classifier, self.config.lecomh, self.config.seed)
        self.path("lecomh").mkdir(exist_ok=True)
        save_system(self.path("lecomh"), result.selection, result.collab)
        save_training_log(result.log, self.path("lecomh", "training_log.csv"))
        if not self.config.lecomh.freeze_classifier:
            save_classifier(result.classifier, self.path("lecomh", "classifier.weights"), config_hash(self.config))

    def stage_eval(self):
        _, test = self.datasets
        cfg = self.config.lecomh
        selection, collab = load_system(self.path("lecomh"), test.n_classes, cfg.collab_head)
        tuned = self.path("lecomh", "classifier.weights")
        classifier = load_classifier(tuned) if tuned.exists() else self.classifier
        records, summary = evaluate_system(
            selection, collab, classifier, test, self.config.seed, cfg.temperature, cfg.hard_eval
        )
        emit_predictions(records, self.path("predictions.csv"))
        emit_curve([dataclasses.replace(summary, lambda_=cfg.lambda_)], self.path("eval_summary.csv"))
        emit_baselines(baselines_simple(test, self.classifier, self.config.seed), self.path("baselines.csv"))
        deferral = baseline_confidence_deferral(self.classifier, test, self.config.eval.coverage_targets)
        emit_curve(deferral, self.path(CURVES["deferral"]))

    def stage_sweep(self):
        _, test = self.datasets
        cfg = self.config.eval
        points, _ = sweep_lambda(
            self.consensus(),
            self.classifier,
            test,
            self.config.lecomh,
            cfg.lambdas,
            cfg.trials,
            self.config.seed,
            cfg.workers,
            self.path("sweep"),
        )
        emit_curve(points, self.path(CURVES["lecomh"]))
        logger.info("lambda/coverage spearman correlation %.3f", lambda_coverage_correlation(points))

    def write_manifest(self) -> Path:
        files = {
            str(p.relative_to(self.run_dir).as_posix()): file_digest(p)
            for p in sorted(self.run_dir.rglob("*"))
            if p.is_file() and p.name != "manifest.json"
        }
        manifest = {
            "config_hash": config_hash(self.config),
            "started_at": self.started_at,
            "finished_at": _now(),
            "hard_eval": self.config.lecomh.hard_eval,
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "pandas": pd.__version__,
                "scipy": scipy.__version__,
                "scikit-learn": sklearn.__version__,
                "pydantic": pydantic.VERSION,
            },
            "files": files,
        }
        path = self.path("manifest.json")
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")
        return path


def cmd_pipeline(config: RunConfig, stage: Optional[str] = None, force: bool = False) -> Path:
    """Run every stage in a new run directory, or resume the latest run for this config from `stage`."""
    if stage:
        run_dir = latest_run_dir(config, config.output_dir)
        if run_dir is None:
            raise ConfigError("no earlier run for this configuration to resume", key="--stage")
    else:
        run_dir = create_run_dir(config, config.output_dir, force)
    return ExperimentPipeline(config, run_dir).run(start=stage or STAGES[0])


def nearest_half_coverage(points: Sequence[CoveragePoint]) -> CoveragePoint:
    """The point closest to coverage 0.5; equidistant points resolve to the lower coverage."""
    return min(points, key=lambda p: (round(abs(p.coverage - 0.5), 12), p.coverage))


def cmd_report(run_dirs: Sequence[Union[str, Path]], out_path: Union[str, Path], force: bool = False) -> pd.DataFrame:
    out_path = Path(out_path)
    if out_path.exists() and not force:
        raise OutputExistsError(f"{out_path} exists; pass --force to overwrite")
    rows: List[Dict[str, object]] = []
    for run_dir in map(Path, run_dirs):
        for method, filename in CURVES.items():
            path = run_dir / filename
            if not path.is_file():
                logger.warning("skipping %s: %s is missing", run_dir, filename)
                continue
            points = read_curve(path)
            if not points:
                logger.warning("skipping %s: %s is empty", run_dir, filename)
                continue
            at_half = nearest_half_coverage(points)
            rows.append({
                "run": run_dir.name,
                "method": method,
                "coverage": at_half.coverage,
                "accuracy_at_coverage": at_half.accuracy,
                "best_accuracy": max(p.accuracy for p in points),
            })
    frame = pd.DataFrame(rows, columns=["run", "method", "coverage", "accuracy_at_coverage", "best_accuracy"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_path, index=False, float_format="%.17g", lineterminator="\n")
    out_path.with_name(out_path.name + ".notes.txt").write_text(REFERENCE_NOTE, encoding="utf-8", newline="\n")
    return frame
