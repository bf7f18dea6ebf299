"""Minimal numerical substrate: feedforward nets over float64 matrices, losses, SGD and a gradient oracle.

Matrices are plain 2-D ``numpy.ndarray`` of dtype float64. Weights are stored ``(fan_in, fan_out)`` so a
forward pass is ``h @ W + b``.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import DataParseError, NumericError, RangeError, ShapeError, StateError

LOG_CLAMP = 1e-12
WEIGHTS_MAGIC = "mlp v1"


@dataclass
class _Trace:
    inputs: List[np.ndarray]
    preacts: List[np.ndarray]


@dataclass
class Mlp:
    layer_sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    _trace: Optional[_Trace] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ShapeError(f"an Mlp needs at least two layer sizes, got {self.layer_sizes}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("one weight matrix and one bias vector per layer transition")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} do not match {expected}")

    @classmethod
    def create(cls, layer_sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        """Scaled-uniform (Glorot) weights, zero biases."""
        sizes = [int(s) for s in layer_sizes]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "Mlp":
        sizes = [int(s) for s in layer_sizes]
        return cls(
            sizes,
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
        )

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[np.ndarray]:
        """W0, b0, W1, b1, ... (the order used by the weights file)."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def same_parameters(self, other: "Mlp") -> bool:
        """Bit-level equality of architecture and every parameter."""
        if self.layer_sizes != other.layer_sizes:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.parameters(), other.parameters())
        )


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: Optional[np.ndarray] = None

    def parameters(self) -> List[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    @classmethod
    def zeros_like(cls, net: Mlp) -> "Gradients":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


@dataclass
class OptState:
    velocity_w: List[np.ndarray]
    velocity_b: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net: Mlp) -> "OptState":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def forward(net: Mlp, batch: np.ndarray) -> np.ndarray:
    """Logits for a (batch, in_dim) matrix; records the activations needed by `backward`."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.in_dim:
        raise ShapeError(f"batch shape {batch.shape} does not match input size {net.in_dim}")
    inputs, preacts = [batch], []
    h = batch
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w + b
        preacts.append(a)
        if i < net.n_layers - 1:
            h = relu(a)
            inputs.append(h)
        else:
            h = a
    net._trace = _Trace(inputs, preacts)
    return h


def backward(net: Mlp, batch: np.ndarray, loss_grad: np.ndarray) -> Gradients:
    """Gradients of a scalar loss given dLoss/dLogits for the batch of the last `forward` call.

    The returned `Gradients.inputs` holds dLoss/dBatch so callers can chain through the net's input.
    """
    trace = net._trace
    if trace is None:
        raise StateError("backward called before forward")
    recorded = trace.inputs[0]
    batch = np.asarray(batch, dtype=np.float64)
    if batch is not recorded and (batch.shape != recorded.shape or not np.array_equal(batch, recorded)):
        raise StateError("backward batch differs from the batch of the last forward pass")
    delta = np.asarray(loss_grad, dtype=np.float64)
    if delta.shape != trace.preacts[-1].shape:
        raise ShapeError(f"loss gradient shape {delta.shape} does not match logits {trace.preacts[-1].shape}")

    grad_w: List[np.ndarray] = [None] * net.n_layers
    grad_b: List[np.ndarray] = [None] * net.n_layers
    for i in reversed(range(net.n_layers)):
        grad_w[i] = trace.inputs[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
        if i > 0:
            delta = delta * (trace.preacts[i - 1] > 0)
    return Gradients(grad_w, grad_b, delta)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """dLoss/dLogits from dLoss/dProbs through a row softmax."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    return float(per_example_cross_entropy(probs, targets).mean())


def per_example_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ShapeError(f"probs {probs.shape} and targets {targets.shape} differ")
    return -(targets * np.log(np.maximum(probs, LOG_CLAMP))).sum(axis=-1)


def cross_entropy_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """dMeanCE/dLogits for softmax outputs (the clamp is treated as inactive)."""
    return (probs - targets) / probs.shape[0]


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[np.asarray(labels, dtype=np.int64)]


def sgd_step(
    net: Mlp,
    grads: Gradients,
    state: OptState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> Tuple[Mlp, OptState]:
    """Momentum SGD with L2 decay folded into the velocity (weights only, never biases).

    v <- momentum * v + grad + weight_decay * w ;  w <- w - lr * v
    """
    new_net = net.copy()
    new_state = OptState([], [])
    for i in range(net.n_layers):
        gw, gb = grads.weights[i], grads.biases[i]
        if gw.shape != net.weights[i].shape or gb.shape != net.biases[i].shape:
            raise ShapeError(f"gradient shapes do not match layer {i}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError("non-finite gradient", layer=i)
        vw = momentum * state.velocity_w[i] + gw + weight_decay * net.weights[i]
        vb = momentum * state.velocity_b[i] + gb
        new_net.weights[i] -= lr * vw
        new_net.biases[i] -= lr * vb
        new_state.velocity_w.append(vw)
        new_state.velocity_b.append(vb)
    return new_net, new_state


def cosine_lr(epoch: int, total_epochs: int, initial: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise RangeError(f"epoch {epoch} outside [0, {total_epochs})")
    return initial * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def finite_diff_grad(loss_fn: Callable[[Mlp], float], net: Mlp, step: float = 1e-5) -> Gradients:
    """Central-difference estimate of dLoss/dParam for every weight and bias of `net`."""
    probe = net.copy()
    estimates = []
    for param in probe.parameters():
        est = np.zeros_like(param)
        flat, flat_est = param.reshape(-1), est.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            plus = loss_fn(probe)
            flat[k] = original - step
            minus = loss_fn(probe)
            flat[k] = original
            flat_est[k] = (plus - minus) / (2.0 * step)
        estimates.append(est)
    return Gradients(estimates[0::2], estimates[1::2])


def max_relative_error(analytic: Gradients, numeric: Gradients, floor: float = 1e-8) -> float:
    """Largest |a - n| / max(|a|, |n|) over parameters where either magnitude reaches `floor`."""
    worst = 0.0
    for a, n in zip(analytic.parameters(), numeric.parameters()):
        scale = np.maximum(np.abs(a), np.abs(n))
        mask = scale >= floor
        if mask.any():
            worst = max(worst, float((np.abs(a - n)[mask] / scale[mask]).max()))
    return worst


def format_weights(net: Mlp) -> str:
    lines = [f"{WEIGHTS_MAGIC} {' '.join(str(s) for s in net.layer_sizes)}"]
    for param in net.parameters():
        lines.append(" ".join(format(float(v), ".17g") for v in param.reshape(-1)))
    return "\n".join(lines) + "\n"


def parse_weights(text: str, source: Union[str, Path] = "<string>") -> Mlp:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(WEIGHTS_MAGIC + " "):
        raise DataParseError(source, 1, f"expected header '{WEIGHTS_MAGIC} <layer sizes>'")
    try:
        sizes = [int(tok) for tok in lines[0][len(WEIGHTS_MAGIC):].split()]
    except ValueError:
        raise DataParseError(source, 1, "layer sizes must be integers")
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise DataParseError(source, 1, f"invalid layer sizes {sizes}")
    shapes = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        shapes.extend([(a, b), (b,)])
    if len(lines) - 1 != len(shapes):
        raise DataParseError(source, len(lines), f"expected {len(shapes)} parameter lines, found {len(lines) - 1}")
    params = []
    for offset, shape in enumerate(shapes):
        line_no = offset + 2
        try:
            values = np.array([float(tok) for tok in lines[line_no - 1].split()], dtype=np.float64)
        except ValueError:
            raise DataParseError(source, line_no, "non-numeric parameter value")
        if values.size != int(np.prod(shape)):
            raise DataParseError(source, line_no, f"expected {int(np.prod(shape))} values, found {values.size}")
        if not np.all(np.isfinite(values)):
            raise DataParseError(source, line_no, "non-finite parameter value")
        params.append(values.reshape(shape))
    return Mlp(sizes, params[0::2], params[1::2])


def save_weights(net: Mlp, path: Union[str, Path]) -> None:
    Path(path).write_text(format_weights(net), encoding="utf-8", newline="\n")


def load_weights(path: Union[str, Path]) -> Mlp:
    return parse_weights(Path(path).read_text(encoding="utf-8"), source=path)

