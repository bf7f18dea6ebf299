"""Noisy-label pretraining of the frozen AI classifier.

Each epoch resamples one annotation per training example as its label. After the warmup epochs every
mini-batch keeps only the `small_loss_keep_ratio` fraction with the lowest loss before the gradient step.
Held-out accuracy is the expected agreement with a sampled label, i.e. the mean agreement with each
annotator. The snapshot with the best held-out accuracy is returned; while the filter is enabled, only
epochs after warmup are candidates.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score
from sklearn.model_selection import train_test_split

from ..errors import ConfigError, DataParseError, NumericError, ShapeError
from ..models.records import DatasetMeta, MultiRaterDataset, PretrainEpoch
from ..models.schemas import PretrainConfig
from .data import sample_noisy_labels
from .nnet import (
    Mlp,
    OptState,
    backward,
    cosine_lr,
    forward,
    load_weights,
    one_hot,
    per_example_cross_entropy,
    save_weights,
    sgd_step,
    softmax,
)

logger = logging.getLogger(__name__)


@dataclass
class Classifier:
    net: Mlp
    meta: DatasetMeta
    history: List[PretrainEpoch] = field(default_factory=list, repr=False)
    best_epoch: int = -1

    def __post_init__(self):
        if self.net.out_dim != self.meta.n_classes:
            raise ShapeError(f"classifier outputs {self.net.out_dim} logits for {self.meta.n_classes} classes")
        if self.net.in_dim != self.meta.feature_dim:
            raise ShapeError(f"classifier input {self.net.in_dim} does not match feature dim {self.meta.feature_dim}")

    def logits(self, features: np.ndarray) -> np.ndarray:
        return forward(self.net, features)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(features))

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)

    def copy(self) -> "Classifier":
        return Classifier(self.net.copy(), self.meta, list(self.history), self.best_epoch)


def heldout_accuracy(annotations: np.ndarray, predictions: np.ndarray) -> float:
    return float(np.mean([accuracy_score(column, predictions) for column in annotations.T]))


def pretrain_classifier(dataset: MultiRaterDataset, config: PretrainConfig, seed: int) -> Classifier:
    if dataset.n_annotators < 1:
        raise ConfigError("pretraining needs at least one annotator")
    if len(dataset) < 2:
        raise ConfigError("pretraining needs at least two examples")
    opt = config.opt
    rng = np.random.default_rng(seed)
    n_classes = dataset.n_classes

    train_idx, heldout_idx = train_test_split(
        np.arange(len(dataset)), test_size=config.heldout_fraction, random_state=seed, shuffle=True
    )
    heldout_x = dataset.features[heldout_idx]
    heldout_labels = dataset.annotations[heldout_idx]
    filtering = config.small_loss_keep_ratio < 1.0 and config.warmup_epochs < opt.epochs
    first_snapshot = config.warmup_epochs if filtering else 0

    net = Mlp.create([dataset.meta.feature_dim, *config.hidden, n_classes], rng)
    state = OptState.zeros_like(net)
    best_net, best_acc, best_epoch = net.copy(), -1.0, -1
    history: List[PretrainEpoch] = []

    for epoch in range(opt.epochs):
        lr = cosine_lr(epoch, opt.epochs, opt.learning_rate)
        labels = sample_noisy_labels(dataset.annotations[train_idx], rng)
        order = rng.permutation(len(train_idx))
        select = filtering and epoch >= config.warmup_epochs
        loss_sum, kept = 0.0, 0

        for start in range(0, len(order), opt.batch_size):
            rows = order[start:start + opt.batch_size]
            x = dataset.features[train_idx[rows]]
            targets = one_hot(labels[rows], n_classes)
            probs = softmax(forward(net, x))
            losses = per_example_cross_entropy(probs, targets)
            if not np.all(np.isfinite(losses)):
                raise NumericError("non-finite pretraining loss", epoch=epoch)
            mask = np.ones(len(rows))
            if select:
                n_keep = max(1, math.ceil(config.small_loss_keep_ratio * len(rows)))
                mask = np.zeros(len(rows))
                mask[np.argsort(losses, kind="stable")[:n_keep]] = 1.0
            grad = (probs - targets) * mask[:, None] / mask.sum()
            net, state = sgd_step(net, backward(net, x, grad), state, lr, opt.momentum, opt.weight_decay)
            loss_sum += float(losses[mask > 0].sum())
            kept += int(mask.sum())

        heldout_acc = heldout_accuracy(heldout_labels, np.argmax(forward(net, heldout_x), axis=1))
        history.append(PretrainEpoch(epoch, loss_sum / kept, heldout_acc, kept / len(train_idx), lr))
        logger.debug("pretrain epoch %d: loss=%.4f heldout=%.4f kept=%.3f", epoch, loss_sum / kept, heldout_acc, kept / len(train_idx))
        if epoch >= first_snapshot and heldout_acc > best_acc:
            best_net, best_acc, best_epoch = net.copy(), heldout_acc, epoch

    logger.info("pretraining done: best held-out accuracy %.4f at epoch %d", best_acc, best_epoch)
    meta = DatasetMeta(n_classes, dataset.n_annotators, dataset.meta.feature_dim, seed)
    return Classifier(best_net, meta, history, best_epoch)


def evaluate_classifier(classifier: Classifier, dataset: MultiRaterDataset) -> float:
    truth = dataset.require_ground_truth()
    return float(accuracy_score(truth, classifier.predict(dataset.features)))


def save_classifier(classifier: Classifier, path: Union[str, Path], config_hash: str = "") -> None:
    save_weights(classifier.net, path)
    meta = classifier.meta
    Path(f"{path}.meta").write_text(
        f"classes={meta.n_classes} dim={meta.feature_dim} annotators={meta.n_annotators} "
        f"seed={meta.seed} config={config_hash[:12] or '-'}\n",
        encoding="utf-8",
        newline="\n",
    )


def load_classifier(path: Union[str, Path]) -> Classifier:
    sidecar = Path(f"{path}.meta")
    fields: Dict[str, str] = {}
    for token in sidecar.read_text(encoding="utf-8").split():
        key, _, value = token.partition("=")
        fields[key] = value
    try:
        meta = DatasetMeta(
            int(fields["classes"]), int(fields["annotators"]), int(fields["dim"]), int(fields["seed"])
        )
    except (KeyError, ValueError):
        raise DataParseError(sidecar, 1, "expected classes=, dim=, annotators= and seed= fields")
    return Classifier(load_weights(path), meta)


def save_history(classifier: Classifier, path: Union[str, Path]) -> None:
    frame = pd.DataFrame(
        [(e.epoch, e.loss, e.heldout_accuracy, e.kept_fraction, e.lr) for e in classifier.history],
        columns=["epoch", "loss", "heldout_accuracy", "kept_fraction", "lr"],
    )
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
