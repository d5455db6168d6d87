from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from logging import Logger
from pathlib import Path
from typing import Dict, Final, Iterator, List, Optional, Sequence, Tuple, Union, overload

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from divlab.counterfactual import ClIndex, cl_loss_batch, cl_vectors, modified_cl_loss_batch
from divlab.errors import (
    ConfigurationError, ConvergenceError, DimensionError, EmptyInputError, ModeError, check_dimension
)
from divlab.neural import Mlp, Mode, eval_from_input, input_gradient
from divlab.numerics import Rng, sinkhorn_divergence
from divlab.optim import Adam
from divlab.synthdata import ClassGrid, Dataset

default_ridge: Final = 0.1

checkpoint_version: Final = 1

# Coordinates of the causal features in the simulated representation.
feature_dims: Final = (0, 1)

Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]


class Variable(Enum):
    X1: Final = "var_x1"
    X2: Final = "var_x2"
    Extra: Final = "extra"


class SelectionMetric(Enum):
    BestIIA: Final = "iia"
    BestEMD: Final = "emd"


class ClVariant(Enum):
    Full: Final = "full"
    Modified: Final = "modified"


def _signs(a: Vector, ridge: float) -> Vector:
    t = np.tanh(a)

    # sign(0) is taken as +1 so that |s| >= ridge always holds.
    return t + ridge * np.where(t < 0, -1.0, 1.0)


class AlignmentFunction:
    """Invertible linear map W = (M M^T + ridge I) diag(s) with s = tanh(a) + ridge sign(tanh(a))."""

    def __init__(self, m: ArrayLike, a: ArrayLike, ridge: float = default_ridge) -> None:
        if ridge <= 0:
            raise ConfigurationError(f"Ridge constant must be positive: {ridge}")

        self._params: Dict[str, Matrix] = {
            "M": np.array(m, dtype=float, ndmin=2),
            "a": np.array(a, dtype=float).ravel()
        }

        d = self._params["M"].shape[0]

        if self._params["M"].shape != (d, d):
            raise DimensionError(f"M must be square, got shape {self._params['M'].shape}.")

        check_dimension("Sign parameter vector", self._params["a"].size, d)

        self._ridge = ridge

        self.refresh()

    @classmethod
    def random(cls, dim: int, rng: Rng, ridge: float = default_ridge) -> AlignmentFunction:
        return cls(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, dim)), np.ones(dim), ridge)

    @classmethod
    def identity(cls, dim: int, ridge: float = default_ridge) -> AlignmentFunction:
        # M M^T + ridge I = I and s = 1.
        return cls(math.sqrt(1.0 - ridge) * np.eye(dim), np.full(dim, math.atanh(1.0 - ridge)), ridge)

    @property
    def params(self) -> Dict[str, Matrix]:
        return self._params

    @property
    def ridge(self) -> float:
        return self._ridge

    @property
    def dim(self) -> int:
        return self._params["M"].shape[0]

    @property
    def signs(self) -> Vector:
        return self._signs

    @property
    def positive_part(self) -> Matrix:
        return self._positive

    @property
    def weight(self) -> Matrix:
        return self._weight

    @property
    def inverse(self) -> Matrix:
        return self._inverse

    def refresh(self) -> None:
        """Recomputes the derived matrices after the parameters changed in place."""

        m = self._params["M"]

        self._signs = _signs(self._params["a"], self._ridge)
        self._positive = m @ m.T + self._ridge * np.eye(self.dim)
        self._weight = self._positive * self._signs

        assert np.all(np.abs(self._signs) >= self._ridge)

        # W^-1 = diag(1/s) P^-1 with P symmetric positive definite.
        self._inverse = linalg.solve(self._positive, np.eye(self.dim), assume_a="pos") / self._signs[:, None]

    def copy(self) -> AlignmentFunction:
        return AlignmentFunction(self._params["M"], self._params["a"], self._ridge)

    def apply(self, h: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(h, dtype=float) @ self._weight.T

    def invert(self, z: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(z, dtype=float) @ self._inverse.T

    def projector(self, mask: NDArray[np.bool_]) -> Matrix:
        return self._inverse @ (self._weight * mask[:, None])

    def project(self, mask: NDArray[np.bool_], x: ArrayLike) -> NDArray[np.float64]:
        """Row-wise W^-1 D W x."""

        return np.asarray(x, dtype=float) @ self.projector(mask).T

    def project_transpose(self, mask: NDArray[np.bool_], g: Matrix) -> Matrix:
        return g @ self.projector(mask)

    def projection_grad(self, mask: NDArray[np.bool_], x: Matrix, g: Matrix) -> Matrix:
        """Gradient with respect to W of sum(g * project(mask, x)), inverse differentiated exactly."""

        v = self._inverse
        vt_g = g @ v
        dwx = (x @ self._weight.T) * mask

        outer = vt_g * mask
        first = outer.T @ x
        second = v.T @ (g.T @ dwx) @ v.T

        return first - second

    def parameter_gradients(self, grad_weight: Matrix) -> Dict[str, Matrix]:
        grad_positive = grad_weight * self._signs
        grad_signs = np.sum(grad_weight * self._positive, axis=0)

        t = np.tanh(self._params["a"])

        return {
            "M": (grad_positive + grad_positive.T) @ self._params["M"],
            "a": grad_signs * (1.0 - t * t)
        }

    def checksum(self) -> str:
        digest = hashlib.sha256()

        for name in ("M", "a"):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self._params[name], dtype=np.float64).tobytes())

        digest.update(repr(self._ridge).encode("utf-8"))

        return digest.hexdigest()

    def __repr__(self) -> str:
        return f"AlignmentFunction(dim={self.dim}, ridge={self._ridge})"


def apply_alignment(af: AlignmentFunction, h: ArrayLike) -> NDArray[np.float64]:
    vector = np.asarray(h, dtype=float)

    check_dimension("Representation", vector.shape[-1], af.dim)

    return af.apply(vector)


def invert_alignment(af: AlignmentFunction, z: ArrayLike) -> NDArray[np.float64]:
    vector = np.asarray(z, dtype=float)

    check_dimension("Aligned vector", vector.shape[-1], af.dim)

    return af.invert(vector)


@dataclass(frozen=True)
class VariableSelector:
    variable: Variable

    start: int

    size: int

    dim: int

    def __post_init__(self) -> None:
        if self.size < 0 or self.start < 0 or self.start + self.size > self.dim:
            raise ConfigurationError(f"Selector {self.variable.value} [{self.start}, {self.start + self.size}) "
                                     f"does not fit in {self.dim} dimensions.")

    @property
    def var_id(self) -> str:
        return self.variable.value

    @property
    def subspace_size(self) -> int:
        return self.size

    @property
    def mask(self) -> NDArray[np.bool_]:
        flags = np.zeros(self.dim, dtype=bool)
        flags[self.start:self.start + self.size] = True

        return flags

    @property
    def matrix(self) -> Matrix:
        return np.diag(self.mask.astype(float))

    def __or__(self, other: VariableSelector) -> NDArray[np.bool_]:
        return self.mask | other.mask


def default_selectors(dim: int, subspace_size: int = 1) -> Dict[Variable, VariableSelector]:
    if 2 * subspace_size > dim:
        raise ConfigurationError(f"Two subspaces of size {subspace_size} do not fit in {dim} dimensions.")

    return {
        Variable.X1: VariableSelector(Variable.X1, 0, subspace_size, dim),
        Variable.X2: VariableSelector(Variable.X2, subspace_size, subspace_size, dim),
        Variable.Extra: VariableSelector(Variable.Extra, 2 * subspace_size, dim - 2 * subspace_size, dim)
    }


def causal_selectors(selectors: Dict[Variable, VariableSelector]) -> List[VariableSelector]:
    return [selectors[Variable.X1], selectors[Variable.X2]]


def _selector_mask(af: AlignmentFunction, sel: Union[VariableSelector, NDArray[np.bool_]]) -> NDArray[np.bool_]:
    mask = sel.mask if isinstance(sel, VariableSelector) else np.asarray(sel, dtype=bool)

    check_dimension("Selector", mask.size, af.dim)

    return mask


def interchange(af: AlignmentFunction, sel: Union[VariableSelector, NDArray[np.bool_]],
                h_trg: ArrayLike, h_src: ArrayLike) -> NDArray[np.float64]:
    """Replaces the selected aligned coordinates of the target with those of the source."""

    mask = _selector_mask(af, sel)

    target = np.asarray(h_trg, dtype=float)
    source = np.asarray(h_src, dtype=float)

    check_dimension("Target", target.shape[-1], af.dim)
    check_dimension("Source", source.shape[-1], af.dim)

    return target + af.project(mask, source - target)


@dataclass(frozen=True)
class InterventionSample:
    h_src: Vector

    h_trg: Vector

    variable: Variable

    counterfactual_label: int

    cl_key: Tuple[float, float]


class InterventionBatch(Sequence[InterventionSample]):
    """Array-backed intervention samples sharing one intervened variable."""

    def __init__(self, h_src: ArrayLike, h_trg: ArrayLike, variable: Variable,
                 labels: ArrayLike, keys: ArrayLike) -> None:
        self._src = np.array(h_src, dtype=float, ndmin=2)
        self._trg = np.array(h_trg, dtype=float, ndmin=2)
        self._labels = np.asarray(labels, dtype=np.int64).ravel()
        self._keys = np.asarray(keys, dtype=float).reshape(-1, 2)
        self._variable = variable

        if not (self._src.shape == self._trg.shape and self._labels.size == self._keys.shape[0] == self._src.shape[0]):
            raise DimensionError("Sources, targets, labels and keys must describe the same samples.")

    @classmethod
    def of(cls, samples: Sequence[InterventionSample]) -> InterventionBatch:
        if not samples:
            raise EmptyInputError("No intervention samples given.")

        variables = set(map(lambda s: s.variable, samples))

        if len(variables) != 1:
            raise ConfigurationError("A batch must intervene on a single variable.")

        return cls(np.vstack([s.h_src for s in samples]), np.vstack([s.h_trg for s in samples]), variables.pop(),
                   [s.counterfactual_label for s in samples], [s.cl_key for s in samples])

    @property
    def h_src(self) -> Matrix:
        return self._src

    @property
    def h_trg(self) -> Matrix:
        return self._trg

    @property
    def labels(self) -> NDArray[np.int64]:
        return self._labels

    @property
    def keys(self) -> Matrix:
        return self._keys

    @property
    def variable(self) -> Variable:
        return self._variable

    def take(self, index: ArrayLike) -> InterventionBatch:
        i = np.asarray(index, dtype=np.int64)

        return InterventionBatch(self._src[i], self._trg[i], self._variable, self._labels[i], self._keys[i])

    def __len__(self) -> int:
        return self._labels.size

    @overload
    def __getitem__(self, index: int) -> InterventionSample:
        ...

    @overload
    def __getitem__(self, index: slice) -> InterventionBatch:
        ...

    def __getitem__(self, index: Union[int, slice]) -> Union[InterventionSample, InterventionBatch]:
        if isinstance(index, slice):
            return self.take(np.arange(len(self))[index])

        key = (float(self._keys[index, 0]), float(self._keys[index, 1]))

        return InterventionSample(self._src[index], self._trg[index], self._variable, int(self._labels[index]), key)

    def __iter__(self) -> Iterator[InterventionSample]:
        for i in range(len(self)):
            yield self[i]


def make_intervention_samples(dataset: Dataset, indices: ArrayLike, grid: ClassGrid, variable: Variable,
                              count: int, rng: Rng) -> InterventionBatch:
    """Draws source and target uniformly from the indexed pool; the label is the grid class after the swap."""

    pool = np.asarray(indices, dtype=np.int64)

    if pool.size == 0:
        raise EmptyInputError("Cannot draw intervention samples from an empty pool.")

    if variable == Variable.Extra:
        raise ConfigurationError("Interventions target a causal variable.")

    src = pool[rng.integers(pool.size, (count,))]
    trg = pool[rng.integers(pool.size, (count,))]

    if variable == Variable.X2:
        (x1, x2) = (dataset.x1[trg], dataset.x2[src])
    else:
        (x1, x2) = (dataset.x1[src], dataset.x2[trg])

    labels = np.fromiter(map(lambda p: grid.class_of(*p), zip(x1, x2)), dtype=np.int64, count=count)

    return InterventionBatch(dataset.h[src], dataset.h[trg], variable, labels, np.column_stack((x1, x2)))


def within_classes(batch: InterventionBatch, classes: ArrayLike) -> InterventionBatch:
    """Keeps the samples whose counterfactual class is among the given classes."""

    return batch.take(np.nonzero(np.isin(batch.labels, np.asarray(classes)))[0])


def _frozen(model: Mlp) -> None:
    if model.mode != Mode.Eval:
        raise ModeError("Alignment works against a frozen model in Eval mode.")


def intervened(af: AlignmentFunction, sel: VariableSelector, batch: InterventionBatch) -> Matrix:
    return interchange(af, sel, batch.h_trg, batch.h_src)


def das_loss(model: Mlp, samples: InterventionBatch, af: AlignmentFunction,
             sel: VariableSelector) -> Tuple[float, Dict[str, Matrix]]:
    """Mean negative log-probability of the counterfactual labels and its gradients for M and a."""

    _frozen(model)

    if not len(samples):
        raise EmptyInputError("das_loss needs at least one intervention sample.")

    mask = _selector_mask(af, sel)
    delta = samples.h_src - samples.h_trg

    (loss, grad_h) = input_gradient(model, samples.h_trg + af.project(mask, delta), samples.labels)

    return loss, af.parameter_gradients(af.projection_grad(mask, delta, grad_h))


def evaluate_iia(model: Mlp, af: AlignmentFunction, sel: VariableSelector, samples: InterventionBatch) -> float:
    _frozen(model)

    if not len(samples):
        raise EmptyInputError("IIA is undefined for an empty sample list.")

    (predicted, _) = eval_from_input(model, intervened(af, sel, samples))

    return float(np.mean(predicted == samples.labels))


@dataclass(frozen=True)
class AlignTrainConfig:
    learning_rate: float = 0.01

    behavioral_weight: float = 1.0

    cl_weight: float = 0.0

    cl_variant: ClVariant = ClVariant.Modified

    patience: int = 400

    max_epochs: int = 300

    batch_size: int = 64

    samples_per_epoch: int = 2048

    monitor_samples: int = 256

    monitor_every: int = 1

    variable: Variable = Variable.X2

    subspace_size: int = 1

    ridge: float = default_ridge

    seed: int = 0

    # None selects by IIA when the behavioral loss is active and by EMD otherwise.
    selection_metric: Optional[SelectionMetric] = None

    def __post_init__(self) -> None:
        if self.behavioral_weight not in (0, 1):
            raise ConfigurationError(f"Behavioral weight must be 0 or 1: {self.behavioral_weight}")

        if self.cl_weight < 0:
            raise ConfigurationError(f"CL weight must be non-negative: {self.cl_weight}")

        if self.behavioral_weight == 0 and self.cl_weight == 0:
            raise ConfigurationError("At least one of the behavioral and CL weights must be positive.")

        if self.variable == Variable.Extra:
            raise ConfigurationError("The intervened variable must be var_x1 or var_x2.")

        for name in ("patience", "batch_size", "samples_per_epoch", "monitor_samples", "monitor_every",
                     "subspace_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive: {getattr(self, name)}")

        if self.max_epochs < 0 or self.learning_rate <= 0 or self.ridge <= 0:
            raise ConfigurationError("max_epochs must be non-negative; learning rate and ridge positive.")

    @property
    def selection(self) -> SelectionMetric:
        if self.selection_metric is not None:
            return self.selection_metric

        return SelectionMetric.BestIIA if self.behavioral_weight > 0 else SelectionMetric.BestEMD


@dataclass(frozen=True)
class AlignEpoch:
    epoch: int

    loss: float

    iia: float

    emd: float

    skipped_cosines: int = 0


@dataclass
class AlignmentResult:
    alignment: AlignmentFunction

    history: List[AlignEpoch] = field(default_factory=list)

    selected_epoch: Optional[int] = None


def alignment_objective(model: Mlp, batch: InterventionBatch, af: AlignmentFunction,
                        selectors: Dict[Variable, VariableSelector], config: AlignTrainConfig,
                        cl_index: Optional[ClIndex]) -> Tuple[float, Dict[str, Matrix], int]:
    """behavioral_weight * DAS loss + cl_weight * CL loss, with gradients for the alignment parameters."""

    sel = selectors[batch.variable]
    mask = sel.mask
    delta = batch.h_src - batch.h_trg
    h_hat = batch.h_trg + af.project(mask, delta)

    loss = 0.0
    skipped = 0

    grad_h = np.zeros_like(h_hat)
    grad_weight = np.zeros((af.dim, af.dim))

    if config.behavioral_weight > 0:
        (das, grad_das) = input_gradient(model, h_hat, batch.labels)

        loss += config.behavioral_weight * das
        grad_h += config.behavioral_weight * grad_das

    if config.cl_weight > 0:
        if cl_index is None:
            raise ConfigurationError("The CL loss needs an index of natural vectors.")

        targets = cl_vectors(cl_index, batch.keys)

        if config.cl_variant == ClVariant.Full:
            cl = cl_loss_batch(h_hat, targets)
        else:
            cl = modified_cl_loss_batch(h_hat, targets, af, causal_selectors(selectors))

            assert cl.weight is not None
            grad_weight += config.cl_weight * cl.weight

        loss += config.cl_weight * cl.loss
        grad_h += config.cl_weight * cl.h_hat
        skipped += cl.skipped

    grad_weight += af.projection_grad(mask, delta, grad_h)

    return loss, af.parameter_gradients(grad_weight), skipped


def row_emd_of(natural: Matrix, compared: Matrix, dims: Sequence[int] = feature_dims) -> float:
    index = list(dims)

    return sinkhorn_divergence(natural[:, index], compared[:, index])


def train_alignment(model: Mlp, dataset: Dataset, train_indices: ArrayLike, grid: ClassGrid,
                    config: AlignTrainConfig, monitor_indices: Optional[ArrayLike] = None,
                    logger: Optional[Logger] = None) -> AlignmentResult:
    """Fits an alignment against the frozen model and returns the snapshot chosen by the selection metric."""

    log = logger or logging.getLogger(__name__)

    _frozen(model)

    pool = np.asarray(train_indices, dtype=np.int64)
    monitor_pool = pool if monitor_indices is None else np.asarray(monitor_indices, dtype=np.int64)

    if pool.size == 0:
        raise EmptyInputError("Alignment training needs a nonempty training pool.")

    rng = Rng(config.seed, 2)

    af = AlignmentFunction.random(dataset.dim, rng.derive(0), config.ridge)
    selectors = default_selectors(dataset.dim, config.subspace_size)
    sel = selectors[config.variable]

    result = AlignmentResult(af.copy())

    if config.max_epochs == 0:
        return result

    cl_index = ClIndex.from_dataset(dataset, pool) if config.cl_weight > 0 else None

    # Counterfactual classes outside the training pool are reserved for held-out evaluation.
    classes = np.unique(dataset.labels[pool])

    monitor = within_classes(make_intervention_samples(
        dataset, monitor_pool, grid, config.variable, config.monitor_samples, rng.derive(1)), classes)

    if not len(monitor):
        raise EmptyInputError("No monitoring samples fall inside the training classes.")

    natural = dataset.h[monitor_pool[rng.derive(2).integers(monitor_pool.size, (config.monitor_samples,))]]

    optimizer = Adam(af.params, config.learning_rate)

    selection = config.selection
    best_score = -math.inf
    best_loss = math.inf
    stale = 0

    for epoch in range(config.max_epochs):
        epoch_rng = rng.derive(3, epoch)
        samples = within_classes(make_intervention_samples(
            dataset, pool, grid, config.variable, config.samples_per_epoch, epoch_rng), classes)

        losses = []
        skipped = 0

        for start in range(0, len(samples), config.batch_size):
            batch = samples.take(np.arange(start, min(start + config.batch_size, len(samples))))

            (loss, grads, missing) = alignment_objective(model, batch, af, selectors, config, cl_index)

            optimizer.step(grads)
            af.refresh()

            losses.append(loss)
            skipped += missing

        epoch_loss = float(np.mean(losses))

        if epoch % config.monitor_every == 0 or epoch == config.max_epochs - 1:
            iia = evaluate_iia(model, af, sel, monitor)

            try:
                emd = row_emd_of(natural, intervened(af, sel, monitor))
            except ConvergenceError as e:
                log.warning("Row EMD unavailable at epoch %d: %s", epoch, e)
                emd = math.nan
        else:
            (iia, emd) = (math.nan, math.nan)

        result.history.append(AlignEpoch(epoch, epoch_loss, iia, emd, skipped))

        log.debug("Alignment epoch %d: loss %.6f, IIA %.4f, row EMD %.6f", epoch, epoch_loss, iia, emd)

        score = iia if selection == SelectionMetric.BestIIA else -emd

        if not math.isnan(score) and score > best_score:
            best_score = score
            result.alignment = af.copy()
            result.selected_epoch = epoch

        if epoch_loss < best_loss:
            best_loss = epoch_loss
            stale = 0
        else:
            stale += 1

            if stale >= config.patience:
                log.debug("Alignment loss stalled for %d epochs; stopping.", stale)
                break

    log.info("Trained alignment for %d epochs; selected epoch %s by %s.",
             len(result.history), result.selected_epoch, selection.value)

    return result


def save_alignment(af: AlignmentFunction, path: Path) -> None:
    with open(path, "wb") as fout:
        np.savez(fout,
                 format_version=np.array(checkpoint_version),
                 M=af.params["M"],
                 a=af.params["a"],
                 ridge=np.array(af.ridge))


def load_alignment(path: Path) -> AlignmentFunction:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])

        if version != checkpoint_version:
            raise ConfigurationError(f"Unsupported alignment checkpoint version {version} in {path}.")

        return AlignmentFunction(data["M"], data["a"], float(data["ridge"]))
