from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from logging import Logger
from pathlib import Path
from typing import Dict, Final, List, Mapping, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import log_softmax, softmax

from divlab.errors import ConfigurationError, DimensionError, EmptyInputError, ModeError, check_dimension
from divlab.numerics import Rng
from divlab.optim import Adam
from divlab.synthdata import Dataset, train_validation_split

checkpoint_version: Final = 1

parameter_names: Final = (
    "bn_in.gamma", "bn_in.beta",
    "hidden.weight", "hidden.bias",
    "bn_hidden.gamma", "bn_hidden.beta",
    "output.weight", "output.bias"
)

buffer_names: Final = ("bn_in.running_mean", "bn_in.running_var", "bn_hidden.running_mean", "bn_hidden.running_var")

Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]


class Mode(Enum):
    Train: Final = "train"
    Eval: Final = "eval"


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 18

    hidden_width: int = 128

    n_classes: int = 10

    dropout_p: float = 0.5

    learning_rate: float = 0.01

    max_epochs: int = 300

    early_stop_patience: int = 30

    batch_size: int = 64

    seed: int = 0

    bn_momentum: float = 0.1

    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError(f"Dropout probability must lie in [0, 1): {self.dropout_p}")

        for name in ("input_dim", "hidden_width", "n_classes", "early_stop_patience", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive: {getattr(self, name)}")

        if self.max_epochs < 0:
            raise ConfigurationError(f"max_epochs must be non-negative: {self.max_epochs}")

        if self.learning_rate <= 0 or self.bn_eps <= 0 or not 0 < self.bn_momentum <= 1:
            raise ConfigurationError("Learning rate, batchnorm epsilon and momentum must be positive.")


@dataclass
class ForwardTrace:
    """Every intermediate value of one forward pass, in layer order."""

    input: Matrix

    input_normalized: Matrix

    input_bn: Matrix

    hidden_pre: Matrix

    hidden_post: Matrix

    dropout_mask: Optional[Matrix]

    hidden_dropped: Matrix

    hidden_normalized: Matrix

    hidden_bn: Matrix

    logits: Matrix

    predicted: NDArray[np.int64]

    mode: Mode

    # Standard deviations used by each batchnorm, batch or running, kept for the backward pass.
    input_std: Vector = field(repr=False, default_factory=lambda: np.zeros(0))

    hidden_std: Vector = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def pre_activations(self) -> Dict[str, Matrix]:
        return {"input_bn": self.input_bn, "hidden": self.hidden_pre, "hidden_bn": self.hidden_bn,
                "output": self.logits}

    @property
    def post_activations(self) -> Dict[str, Matrix]:
        return {"hidden": self.hidden_post, "dropout": self.hidden_dropped}


class Mlp:
    """BatchNorm -> Linear -> ReLU -> Dropout -> BatchNorm -> Linear."""

    def __init__(self, config: MlpConfig, params: Optional[Mapping[str, Matrix]] = None,
                 buffers: Optional[Mapping[str, Vector]] = None) -> None:
        self._config = config
        self._mode = Mode.Train

        (d, width, classes) = (config.input_dim, config.hidden_width, config.n_classes)

        if params is None:
            rng = Rng(config.seed, 0)

            params = {
                "bn_in.gamma": np.ones(d),
                "bn_in.beta": np.zeros(d),
                "hidden.weight": rng.normal(0.0, 1.0 / np.sqrt(d), (width, d)),
                "hidden.bias": np.zeros(width),
                "bn_hidden.gamma": np.ones(width),
                "bn_hidden.beta": np.zeros(width),
                "output.weight": rng.normal(0.0, 1.0 / np.sqrt(width), (classes, width)),
                "output.bias": np.zeros(classes)
            }

        if buffers is None:
            buffers = {
                "bn_in.running_mean": np.zeros(d),
                "bn_in.running_var": np.ones(d),
                "bn_hidden.running_mean": np.zeros(width),
                "bn_hidden.running_var": np.ones(width)
            }

        self._params: Dict[str, Matrix] = {k: np.array(params[k], dtype=float) for k in parameter_names}
        self._buffers: Dict[str, Vector] = {k: np.array(buffers[k], dtype=float) for k in buffer_names}

        expected = {
            "bn_in.gamma": (d,), "bn_in.beta": (d,),
            "hidden.weight": (width, d), "hidden.bias": (width,),
            "bn_hidden.gamma": (width,), "bn_hidden.beta": (width,),
            "output.weight": (classes, width), "output.bias": (classes,),
            "bn_in.running_mean": (d,), "bn_in.running_var": (d,),
            "bn_hidden.running_mean": (width,), "bn_hidden.running_var": (width,)
        }

        for (name, value) in list(self._params.items()) + list(self._buffers.items()):
            if value.shape != expected[name]:
                raise DimensionError(f"{name} has shape {value.shape} but {expected[name]} was expected.")

    @property
    def config(self) -> MlpConfig:
        return self._config

    @property
    def mode(self) -> Mode:
        return self._mode

    @mode.setter
    def mode(self, value: Mode) -> None:
        self._mode = value

    @property
    def params(self) -> Dict[str, Matrix]:
        return self._params

    @property
    def buffers(self) -> Dict[str, Vector]:
        return self._buffers

    def eval(self) -> Mlp:
        self._mode = Mode.Eval
        return self

    def train(self) -> Mlp:
        self._mode = Mode.Train
        return self

    def copy(self) -> Mlp:
        model = Mlp(self._config, self._params, self._buffers)
        model.mode = self._mode

        return model

    def checksum(self) -> str:
        digest = hashlib.sha256()

        for (name, value) in sorted(list(self._params.items()) + list(self._buffers.items())):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(value, dtype=np.float64).tobytes())

        return digest.hexdigest()

    def __repr__(self) -> str:
        c = self._config
        return f"Mlp({c.input_dim} -> {c.hidden_width} -> {c.n_classes}, mode={self._mode.value})"


def _as_batch(model: Mlp, h: ArrayLike) -> Matrix:
    batch = np.array(h, dtype=float, ndmin=2)

    if batch.ndim != 2:
        raise DimensionError(f"Expected a vector or a batch of vectors, got shape {batch.shape}.")

    check_dimension("Input", batch.shape[1], model.config.input_dim)

    return batch


def _batch_norm(model: Mlp, prefix: str, x: Matrix) -> Tuple[Matrix, Matrix, Vector]:
    config = model.config
    gamma = model.params[prefix + ".gamma"]
    beta = model.params[prefix + ".beta"]

    if model.mode == Mode.Train:
        mean = x.mean(axis=0)
        var = x.var(axis=0)

        count = x.shape[0]
        momentum = config.bn_momentum

        running_mean = model.buffers[prefix + ".running_mean"]
        running_var = model.buffers[prefix + ".running_var"]

        running_mean *= 1.0 - momentum
        running_mean += momentum * mean

        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = model.buffers[prefix + ".running_mean"]
        var = model.buffers[prefix + ".running_var"]

    std = np.sqrt(var + config.bn_eps)
    normalized = (x - mean) / std

    return normalized, gamma * normalized + beta, std


def forward(model: Mlp, h: ArrayLike, rng: Optional[Rng] = None) -> ForwardTrace:
    batch = _as_batch(model, h)
    train = model.mode == Mode.Train
    p = model.config.dropout_p

    if train and batch.shape[0] < 2:
        raise ModeError("Batch normalization in Train mode needs at least two samples.")

    if train and p > 0 and rng is None:
        raise ModeError("Train mode with dropout requires a random generator.")

    (input_normalized, input_bn, input_std) = _batch_norm(model, "bn_in", batch)

    hidden_pre = input_bn @ model.params["hidden.weight"].T + model.params["hidden.bias"]
    hidden_post = np.maximum(hidden_pre, 0.0)

    mask = None

    if train and p > 0:
        assert rng is not None
        # Inverted dropout so Eval needs no rescaling.
        mask = (rng.uniform(hidden_post.shape) >= p) / (1.0 - p)
        hidden_dropped = hidden_post * mask
    else:
        hidden_dropped = hidden_post

    (hidden_normalized, hidden_bn, hidden_std) = _batch_norm(model, "bn_hidden", hidden_dropped)

    logits = hidden_bn @ model.params["output.weight"].T + model.params["output.bias"]

    return ForwardTrace(
        input=batch,
        input_normalized=input_normalized,
        input_bn=input_bn,
        hidden_pre=hidden_pre,
        hidden_post=hidden_post,
        dropout_mask=mask,
        hidden_dropped=hidden_dropped,
        hidden_normalized=hidden_normalized,
        hidden_bn=hidden_bn,
        logits=logits,
        predicted=np.argmax(logits, axis=1),
        mode=model.mode,
        input_std=input_std,
        hidden_std=hidden_std)


def _labels(model: Mlp, labels: ArrayLike, count: int) -> NDArray[np.int64]:
    target = np.asarray(labels, dtype=np.int64).ravel()

    check_dimension("Label list", target.size, count, "entries")

    if target.size and (target.min() < 0 or target.max() >= model.config.n_classes):
        raise DimensionError(f"Labels must lie in [0, {model.config.n_classes}).")

    return target


def cross_entropy(logits: Matrix, labels: NDArray[np.int64]) -> Tuple[float, Matrix]:
    """Mean negative log-likelihood and its gradient with respect to the logits."""

    count = logits.shape[0]
    log_probs = log_softmax(logits, axis=1)

    loss = -float(np.mean(log_probs[np.arange(count), labels]))

    grad = np.exp(log_probs)
    grad[np.arange(count), labels] -= 1.0

    return loss, grad / count


def _batch_norm_backward(model: Mlp, prefix: str, normalized: Matrix, std: Vector,
                         grad_out: Matrix) -> Tuple[Matrix, Vector, Vector]:
    gamma = model.params[prefix + ".gamma"]

    grad_gamma = np.sum(grad_out * normalized, axis=0)
    grad_beta = np.sum(grad_out, axis=0)

    grad_normalized = grad_out * gamma

    if model.mode == Mode.Eval:
        return grad_normalized / std, grad_gamma, grad_beta

    count = grad_out.shape[0]

    grad_in = (count * grad_normalized
               - grad_normalized.sum(axis=0)
               - normalized * np.sum(grad_normalized * normalized, axis=0)) / (count * std)

    return grad_in, grad_gamma, grad_beta


def backward(model: Mlp, trace: ForwardTrace, grad_logits: Matrix) -> Tuple[Dict[str, Matrix], Matrix]:
    """Reverse-mode pass returning parameter gradients and the gradient with respect to the input."""

    if trace.mode != model.mode:
        raise ModeError("The trace was recorded in a different mode.")

    grads: Dict[str, Matrix] = {}

    grads["output.weight"] = grad_logits.T @ trace.hidden_bn
    grads["output.bias"] = grad_logits.sum(axis=0)

    grad_hidden_bn = grad_logits @ model.params["output.weight"]

    (grad_dropped, grads["bn_hidden.gamma"], grads["bn_hidden.beta"]) = _batch_norm_backward(
        model, "bn_hidden", trace.hidden_normalized, trace.hidden_std, grad_hidden_bn)

    grad_post = grad_dropped if trace.dropout_mask is None else grad_dropped * trace.dropout_mask
    grad_pre = grad_post * (trace.hidden_pre > 0)

    grads["hidden.weight"] = grad_pre.T @ trace.input_bn
    grads["hidden.bias"] = grad_pre.sum(axis=0)

    grad_input_bn = grad_pre @ model.params["hidden.weight"]

    (grad_input, grads["bn_in.gamma"], grads["bn_in.beta"]) = _batch_norm_backward(
        model, "bn_in", trace.input_normalized, trace.input_std, grad_input_bn)

    return grads, grad_input


def loss_and_gradients(model: Mlp, h: ArrayLike, labels: ArrayLike,
                       rng: Optional[Rng] = None) -> Tuple[float, Dict[str, Matrix]]:
    trace = forward(model, h, rng)
    (loss, grad_logits) = cross_entropy(trace.logits, _labels(model, labels, trace.input.shape[0]))

    (grads, _) = backward(model, trace, grad_logits)

    return loss, grads


def input_gradient(model: Mlp, h: ArrayLike, labels: ArrayLike) -> Tuple[float, Matrix]:
    """Eval-mode mean cross-entropy and its gradient with respect to each input vector."""

    if model.mode != Mode.Eval:
        raise ModeError("Input gradients are taken against a frozen model in Eval mode.")

    trace = forward(model, h)
    (loss, grad_logits) = cross_entropy(trace.logits, _labels(model, labels, trace.input.shape[0]))

    (_, grad_input) = backward(model, trace, grad_logits)

    return loss, grad_input


def eval_from_input(model: Mlp, h_batch: ArrayLike) -> Tuple[NDArray[np.int64], Matrix]:
    if model.mode != Mode.Eval:
        raise ModeError("Evaluation requires a model in Eval mode.")

    trace = forward(model, h_batch)

    return trace.predicted, softmax(trace.logits, axis=1)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int

    train_loss: float

    validation_loss: float

    validation_accuracy: float


def evaluate_loss(model: Mlp, dataset: Dataset) -> Tuple[float, float]:
    if not len(dataset):
        return float("nan"), float("nan")

    trace = forward(model, dataset.h)
    (loss, _) = cross_entropy(trace.logits, _labels(model, dataset.labels, len(dataset)))

    return loss, float(np.mean(trace.predicted == dataset.labels))


def train_mlp(dataset: Dataset, config: MlpConfig, validation: Optional[Dataset] = None,
              logger: Optional[Logger] = None) -> Tuple[Mlp, List[EpochRecord]]:
    """Trains with Adam and early stopping, returning the minimum-validation-loss snapshot in Eval mode."""

    log = logger or logging.getLogger(__name__)

    if not len(dataset):
        raise EmptyInputError("Cannot train on an empty dataset.")

    check_dimension("Dataset", dataset.dim, config.input_dim)

    if dataset.labels.min() < 0 or dataset.labels.max() >= config.n_classes:
        raise DimensionError(f"Labels must lie in [0, {config.n_classes}).")

    rng = Rng(config.seed, 1)

    if validation is None:
        (train_index, validation_index) = train_validation_split(np.arange(len(dataset)), rng.derive(0))

        (train, validation) = (dataset.subset(train_index), dataset.subset(validation_index))

        if not len(validation):
            validation = train
    else:
        train = dataset

    model = Mlp(config)
    history: List[EpochRecord] = []

    if config.max_epochs == 0:
        return model.eval(), history

    optimizer = Adam(model.params, config.learning_rate)

    best = model.copy().eval()
    best_loss = float("inf")
    stale = 0

    for epoch in range(config.max_epochs):
        model.train()

        epoch_rng = rng.derive(1, epoch)
        order = epoch_rng.permutation(len(train))

        losses = []

        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]

            # A trailing singleton batch cannot be batch-normalized.
            if batch.size < 2:
                continue

            (loss, grads) = loss_and_gradients(model, train.h[batch], train.labels[batch], epoch_rng)
            optimizer.step(grads)

            losses.append(loss)

        model.eval()

        (validation_loss, accuracy) = evaluate_loss(model, validation)

        record = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), validation_loss, accuracy)
        history.append(record)

        log.debug("Epoch %d: train loss %.6f, validation loss %.6f, accuracy %.4f",
                  epoch, record.train_loss, validation_loss, accuracy)

        if validation_loss < best_loss:
            best_loss = validation_loss
            best = model.copy().eval()
            stale = 0
        else:
            stale += 1

            if stale >= config.early_stop_patience:
                log.debug("Stopping early after %d epochs.", epoch + 1)
                break

    log.info("Trained MLP for %d epochs (best validation loss %.6f).", len(history), best_loss)

    return best, history


def save_model(model: Mlp, path: Path) -> None:
    arrays = {f"param/{k}": v for (k, v) in model.params.items()}
    arrays.update({f"buffer/{k}": v for (k, v) in model.buffers.items()})

    with open(path, "wb") as fout:
        np.savez(fout,
                 format_version=np.array(checkpoint_version),
                 config=np.array(json.dumps(asdict(model.config), sort_keys=True)),
                 **arrays)


def load_model(path: Path) -> Mlp:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])

        if version != checkpoint_version:
            raise ConfigurationError(f"Unsupported model checkpoint version {version} in {path}.")

        config = MlpConfig(**json.loads(str(data["config"])))

        params = {k: data[f"param/{k}"] for k in parameter_names}
        buffers = {k: data[f"buffer/{k}"] for k in buffer_names}

    return Mlp(config, params, buffers).eval()
