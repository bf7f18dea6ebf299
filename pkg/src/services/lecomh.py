"""Selection network, collaboration network and their cost-regularized training.

Selection index k in [0, M] means "AI plus k annotators". The collaboration input is

    [ai_probs, gate_1 * m_1, ..., gate_M * m_M],   gate_j = sum_{k >= j} z_k

where z is the (relaxed) selection. For a one-hot z at index K this fills slots 1..K and zeroes the rest.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..errors import ConfigError, ContractError, NumericError, ShapeError
from ..models.records import ConsensusDataset, EpochStats, MultiRaterExample, SelectionSample, TrainingLog
from ..models.schemas import LecomhConfig
from .nnet import (
    Gradients,
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
    softmax_backward,
)
from .pretrain import Classifier

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int], np.random.Generator]


@dataclass
class SelectionNet:
    net: Mlp

    def __post_init__(self):
        if self.net.out_dim < 1:
            raise ShapeError("selection net needs at least one output")

    @classmethod
    def create(cls, feature_dim: int, n_annotators: int, hidden: Sequence[int], rng: np.random.Generator) -> "SelectionNet":
        return cls(Mlp.create([feature_dim, *hidden, n_annotators + 1], rng))

    @property
    def n_annotators(self) -> int:
        return self.net.out_dim - 1

    def logits(self, features: np.ndarray) -> np.ndarray:
        return forward(self.net, features)


@dataclass
class CollabNet:
    net: Mlp
    n_classes: int
    head: str = "network"

    def __post_init__(self):
        if self.net.out_dim != self.n_classes or self.net.in_dim % self.n_classes:
            raise ShapeError(
                f"collaboration net {self.net.in_dim}->{self.net.out_dim} does not fit {self.n_classes} classes"
            )

    @classmethod
    def create(
        cls, n_annotators: int, n_classes: int, hidden: Sequence[int], rng: np.random.Generator, head: str = "network"
    ) -> "CollabNet":
        return cls(Mlp.create([(n_annotators + 1) * n_classes, *hidden, n_classes], rng), n_classes, head)

    @property
    def n_annotators(self) -> int:
        return self.net.in_dim // self.n_classes - 1

    def predict_proba(self, inputs: np.ndarray) -> np.ndarray:
        if self.head == "majority":
            return majority_head(inputs, self.n_classes)
        return softmax(forward(self.net, inputs))


def majority_head(inputs: np.ndarray, n_classes: int) -> np.ndarray:
    """Majority vote over the AI argmax and the filled annotator slots, ties toward the AI probabilities."""
    slots = inputs.reshape(inputs.shape[0], -1, n_classes)
    ai = slots[:, 0, :]
    votes = one_hot(np.argmax(ai, axis=1), n_classes) + slots[:, 1:, :].sum(axis=1)
    tied = votes >= votes.max(axis=1, keepdims=True) - 1e-12
    return one_hot(np.argmax(np.where(tied, ai, -np.inf), axis=1), n_classes)


def relaxed_selection(logits: np.ndarray, gumbel: np.ndarray, temperature: float) -> np.ndarray:
    return softmax((logits + gumbel) / temperature)


def gumbel_softmax(logits: Sequence[float], temperature: float, seed: SeedLike) -> SelectionSample:
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}", key="lecomh.temperature")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ContractError("selection logits must be finite")
    rng = np.random.default_rng(seed)
    soft = relaxed_selection(logits, rng.gumbel(size=logits.shape), temperature)
    return SelectionSample(soft, int(np.argmax(soft)))


def selection_gates(z: np.ndarray) -> np.ndarray:
    """gate_j = P(at least j annotators selected), j = 1..M."""
    return np.cumsum(z[..., :0:-1], axis=-1)[..., ::-1]


def assemble_batch(ai_probs: np.ndarray, annotations_onehot: np.ndarray, z: np.ndarray) -> np.ndarray:
    batch, n_annotators, n_classes = annotations_onehot.shape
    if ai_probs.shape != (batch, n_classes) or z.shape != (batch, n_annotators + 1):
        raise ShapeError(
            f"inconsistent collaboration inputs: ai {ai_probs.shape}, annotations "
            f"{annotations_onehot.shape}, selection {z.shape}"
        )
    gated = selection_gates(z)[:, :, None] * annotations_onehot
    return np.concatenate([ai_probs, gated.reshape(batch, n_annotators * n_classes)], axis=1)


def assemble_input(ai_probs: np.ndarray, annotations_onehot: np.ndarray, z: Union[SelectionSample, np.ndarray]) -> np.ndarray:
    soft = z.soft if isinstance(z, SelectionSample) else np.asarray(z, dtype=np.float64)
    return assemble_batch(
        np.asarray(ai_probs, dtype=np.float64)[None],
        np.asarray(annotations_onehot, dtype=np.float64)[None],
        soft[None],
    )[0]


def permute_annotations(example: Union[MultiRaterExample, np.ndarray], seed: SeedLike) -> np.ndarray:
    annotations = example.annotations if isinstance(example, MultiRaterExample) else np.asarray(example)
    return np.random.default_rng(seed).permutation(annotations)


def permute_rows(annotations: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """An independent uniform permutation of every row."""
    order = np.argsort(rng.random(annotations.shape), axis=1, kind="stable")
    return np.take_along_axis(annotations, order, axis=1)


def cost(selection_probs: Sequence[float]) -> float:
    probs = np.asarray(selection_probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ContractError(f"selection probabilities sum to {probs.sum()}, not 1")
    return float(probs @ np.arange(len(probs)))


def expected_cost(selection_probs: np.ndarray) -> np.ndarray:
    return selection_probs @ np.arange(selection_probs.shape[-1])


def final_prediction(
    classifier: Classifier,
    selection: SelectionNet,
    collab: CollabNet,
    example: MultiRaterExample,
    temperature: float,
    seed: SeedLike,
    hard: bool = False,
) -> Tuple[np.ndarray, SelectionSample]:
    """Collaborative prediction for one example whose annotations are already in query order.

    `hard` takes the argmax of g(x); otherwise a Gumbel-softmax sample is drawn and its argmax K decides how
    many annotators are queried. Either way slots 1..K of the collaboration input are filled exactly.
    """
    x = np.asarray(example.features, dtype=np.float64)[None]
    n_annotators = selection.n_annotators
    if len(example.annotations) != n_annotators or collab.n_annotators != n_annotators:
        raise ShapeError(
            f"example has {len(example.annotations)} annotations, nets expect {n_annotators}/{collab.n_annotators}"
        )
    ai_probs = classifier.predict_proba(x)[0]
    logits = selection.logits(x)[0]
    if hard:
        sample = SelectionSample(softmax(logits), int(np.argmax(logits)))
    else:
        sample = gumbel_softmax(logits, temperature, seed)
    z = np.eye(n_annotators + 1)[sample.chosen_index]
    inputs = assemble_input(ai_probs, one_hot(example.annotations, collab.n_classes), z)
    return collab.predict_proba(inputs[None])[0], sample


@dataclass
class LecomhNets:
    selection: SelectionNet
    collab: CollabNet
    classifier: Classifier


@dataclass
class LossResult:
    loss: float
    ce: float
    cost: float
    selection_grads: Gradients
    collab_grads: Gradients
    classifier_grads: Optional[Gradients]
    selection_probs: np.ndarray
    outputs: np.ndarray


def lecomh_loss(
    features: np.ndarray,
    annotations: np.ndarray,
    consensus_labels: np.ndarray,
    nets: LecomhNets,
    config: LecomhConfig,
    gumbel: np.ndarray,
    ai_probs: Optional[np.ndarray] = None,
) -> LossResult:
    """mean CE(consensus, h(p(z, f(x), annotations))) + lambda * mean cost(softmax(g(x))), with gradients.

    `gumbel` is the (B, M+1) noise realization; `ai_probs` may be passed when the classifier is frozen.
    """
    n_classes = nets.collab.n_classes
    batch = features.shape[0]
    n_slots = nets.selection.n_annotators + 1
    fine_tune = not config.freeze_classifier
    if fine_tune or ai_probs is None:
        ai_probs = softmax(forward(nets.classifier.net, features))

    sel_logits = forward(nets.selection.net, features)
    selection_probs = softmax(sel_logits)
    z = relaxed_selection(sel_logits, gumbel, config.temperature)
    annotations_onehot = np.eye(n_classes)[annotations]
    inputs = assemble_batch(ai_probs, annotations_onehot, z)
    outputs = softmax(forward(nets.collab.net, inputs))
    targets = one_hot(consensus_labels, n_classes)

    ce = float(per_example_cross_entropy(outputs, targets).mean())
    costs = expected_cost(selection_probs)
    mean_cost = float(costs.mean())
    loss = ce + config.lambda_ * mean_cost
    if not np.isfinite(loss):
        raise NumericError("non-finite collaboration loss")

    collab_grads = backward(nets.collab.net, inputs, (outputs - targets) / batch)
    grad_inputs = collab_grads.inputs.reshape(batch, n_slots, n_classes)
    grad_gates = (grad_inputs[:, 1:, :] * annotations_onehot).sum(axis=2)
    grad_z = np.zeros_like(z)
    grad_z[:, 1:] = np.cumsum(grad_gates, axis=1)
    grad_logits = softmax_backward(z, grad_z) / config.temperature
    grad_logits += (config.lambda_ / batch) * selection_probs * (np.arange(n_slots) - costs[:, None])
    selection_grads = backward(nets.selection.net, features, grad_logits)

    classifier_grads = None
    if fine_tune:
        grad_ai_logits = softmax_backward(ai_probs, grad_inputs[:, 0, :])
        classifier_grads = backward(nets.classifier.net, features, grad_ai_logits)

    return LossResult(loss, ce, mean_cost, selection_grads, collab_grads, classifier_grads, selection_probs, outputs)


@dataclass
class LecomhResult:
    selection: SelectionNet
    collab: CollabNet
    log: TrainingLog
    classifier: Classifier


def train_lecomh(
    consensus: ConsensusDataset,
    classifier: Classifier,
    config: LecomhConfig,
    seed: int,
) -> LecomhResult:
    dataset = consensus.retained_dataset()
    labels = consensus.retained_labels()
    if len(dataset) == 0:
        raise ConfigError("consensus dataset is empty")
    if dataset.n_annotators < 1:
        raise ConfigError("collaboration training needs at least one annotator")
    opt = config.opt
    rng = np.random.default_rng(seed)
    n, n_annotators = len(dataset), dataset.n_annotators

    nets = LecomhNets(
        SelectionNet.create(dataset.meta.feature_dim, n_annotators, config.selection_hidden, rng),
        CollabNet.create(n_annotators, dataset.n_classes, config.collab_hidden, rng, config.collab_head),
        classifier if config.freeze_classifier else classifier.copy(),
    )
    frozen_probs = nets.classifier.predict_proba(dataset.features) if config.freeze_classifier else None
    sel_state = OptState.zeros_like(nets.selection.net)
    col_state = OptState.zeros_like(nets.collab.net)
    cls_state = OptState.zeros_like(nets.classifier.net)
    log = TrainingLog()

    for epoch in range(opt.epochs):
        lr = cosine_lr(epoch, opt.epochs, opt.learning_rate)
        annotations = permute_rows(dataset.annotations, rng)
        gumbel = rng.gumbel(size=(n, n_annotators + 1))
        order = rng.permutation(n)
        totals = np.zeros(5)

        for start in range(0, n, opt.batch_size):
            rows = order[start:start + opt.batch_size]
            try:
                result = lecomh_loss(
                    dataset.features[rows],
                    annotations[rows],
                    labels[rows],
                    nets,
                    config,
                    gumbel[rows],
                    None if frozen_probs is None else frozen_probs[rows],
                )
                step = (lr, opt.momentum, opt.weight_decay)
                sel_net, sel_state = sgd_step(nets.selection.net, result.selection_grads, sel_state, *step)
                col_net, col_state = sgd_step(nets.collab.net, result.collab_grads, col_state, *step)
                if result.classifier_grads is not None:
                    cls_net, cls_state = sgd_step(nets.classifier.net, result.classifier_grads, cls_state, *step)
                    nets.classifier = Classifier(cls_net, nets.classifier.meta)
            except NumericError as exc:
                raise NumericError(str(exc), layer=exc.layer, epoch=epoch) from exc
            nets.selection = SelectionNet(sel_net)
            nets.collab = CollabNet(col_net, nets.collab.n_classes, nets.collab.head)
            b = len(rows)
            totals += [
                result.loss * b,
                result.ce * b,
                result.cost * b,
                float((np.argmax(result.selection_probs, axis=1) == 0).sum()),
                float((np.argmax(result.outputs, axis=1) == labels[rows]).sum()),
            ]

        loss, ce, mean_cost, covered, correct = totals / n
        log.append(EpochStats(epoch, loss, ce, mean_cost, covered, lr, correct))
        logger.debug(
            "lecomh epoch %d: loss=%.4f ce=%.4f cost=%.3f coverage=%.3f acc=%.4f lr=%.5f",
            epoch, loss, ce, mean_cost, covered, correct, lr,
        )

    final = log.final
    logger.info(
        "lecomh trained (lambda=%g): loss=%.4f coverage=%.3f train_acc=%.4f",
        config.lambda_, final.loss, final.coverage, final.accuracy,
    )
    return LecomhResult(nets.selection, nets.collab, log, nets.classifier)


def save_system(directory: Union[str, Path], selection: SelectionNet, collab: CollabNet) -> None:
    directory = Path(directory)
    save_weights(selection.net, directory / "selection.weights")
    save_weights(collab.net, directory / "collab.weights")


def load_system(directory: Union[str, Path], n_classes: int, head: str = "network") -> Tuple[SelectionNet, CollabNet]:
    directory = Path(directory)
    return (
        SelectionNet(load_weights(directory / "selection.weights")),
        CollabNet(load_weights(directory / "collab.weights"), n_classes, head),
    )


def save_training_log(log: TrainingLog, path: Union[str, Path]) -> None:
    frame = pd.DataFrame(
        [(e.epoch, e.loss, e.ce, e.cost, e.coverage, e.lr) for e in log.epochs],
        columns=["epoch", "loss", "ce", "cost", "coverage", "lr"],
    )
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
