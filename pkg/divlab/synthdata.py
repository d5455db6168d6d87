from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from pathlib import Path
from typing import AbstractSet, Final, Iterable, Iterator, Optional, Sequence, Tuple, Union, overload

import numpy as np
from numpy.typing import ArrayLike, NDArray

from divlab.errors import ConfigurationError, DimensionError, PartitionError
from divlab.numerics import Rng

default_x1_values: Final = (-1.0, 1.0)
default_x2_values: Final = (0.0, 1.0, 2.0, 3.0, 4.0)

# Classes withheld from each default partition; each pair is contained in the other partition.
default_withheld: Final = {
    "DefaultP1": frozenset({1, 8}),
    "DefaultP2": frozenset({3, 6})
}

# Grid indices of the out-of-distribution partitions on the default 2 x 5 grid.
# Dense: x1 in {-1, 1}, x2 in {0, 1} (minimum spacing 1).
# Sparse: x1 in {-1, 1}, x2 in {2, 4} (minimum spacing 2). Classes 3 and 8 are excluded.
dense_classes: Final = frozenset({0, 1, 5, 6})
sparse_classes: Final = frozenset({2, 4, 7, 9})

default_train_fraction: Final = 0.8

csv_fixed_columns: Final = ("class", "x1", "x2")


class Scheme(Enum):
    Default: Final = "default"
    OOD: Final = "ood"


class PartitionName(Enum):
    DefaultP1: Final = "DefaultP1"
    DefaultP2: Final = "DefaultP2"
    Dense: Final = "Dense"
    Sparse: Final = "Sparse"


@dataclass(frozen=True)
class DatasetConfig:
    x1_values: Tuple[float, ...] = default_x1_values

    x2_values: Tuple[float, ...] = default_x2_values

    noise_sd: float = 0.1

    # Pearson correlation of the two feature coordinates (covariance = cov_param * noise_sd^2).
    cov_param: float = 0.2

    extra_dims: int = 16

    samples_per_class: int = 500

    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.x1_values) == 0 or len(self.x2_values) == 0:
            raise ConfigurationError("Both variable value sets must be non-empty.")

        if len(set(self.x1_values)) != len(self.x1_values) or len(set(self.x2_values)) != len(self.x2_values):
            raise ConfigurationError("Variable values must be distinct.")

        if self.noise_sd < 0:
            raise ConfigurationError(f"Noise standard deviation must be non-negative: {self.noise_sd}")

        if not abs(self.cov_param) < 1:
            raise ConfigurationError(
                f"The covariance parameter is a correlation and must lie in (-1, 1): {self.cov_param}")

        if self.extra_dims < 0 or self.samples_per_class < 0 or self.seed < 0:
            raise ConfigurationError("Counts and seeds must be non-negative.")

    @property
    def n_classes(self) -> int:
        return len(self.x1_values) * len(self.x2_values)

    @property
    def dim(self) -> int:
        return 2 + self.extra_dims

    @property
    def grid(self) -> ClassGrid:
        return ClassGrid(self.x1_values, self.x2_values)


class ClassGrid:
    """Bijection between class labels and the Cartesian grid of variable values (x1-major)."""

    def __init__(self, x1_values: Sequence[float], x2_values: Sequence[float]) -> None:
        self._x1_values = tuple(map(float, x1_values))
        self._x2_values = tuple(map(float, x2_values))

        self._points = tuple(product(self._x1_values, self._x2_values))
        self._labels = {p: i for (i, p) in enumerate(self._points)}

    @property
    def x1_values(self) -> Tuple[float, ...]:
        return self._x1_values

    @property
    def x2_values(self) -> Tuple[float, ...]:
        return self._x2_values

    @property
    def points(self) -> Tuple[Tuple[float, float], ...]:
        return self._points

    def __len__(self) -> int:
        return len(self._points)

    def class_of(self, x1: float, x2: float) -> int:
        try:
            return self._labels[(float(x1), float(x2))]
        except KeyError:
            raise ConfigurationError(f"({x1}, {x2}) is not a grid point.") from None

    def values_of(self, label: int) -> Tuple[float, float]:
        return self._points[label]


@dataclass(frozen=True)
class LabeledRep:
    h: NDArray[np.float64]

    class_label: int

    x1: float

    x2: float


class Dataset(Sequence[LabeledRep]):
    """An immutable, array-backed sequence of labeled representations."""

    def __init__(self, h: ArrayLike, labels: ArrayLike, x1: ArrayLike, x2: ArrayLike) -> None:
        self._h = np.array(h, dtype=float, ndmin=2)
        self._labels = np.asarray(labels, dtype=np.int64).ravel()
        self._x1 = np.asarray(x1, dtype=float).ravel()
        self._x2 = np.asarray(x2, dtype=float).ravel()

        count = self._labels.size

        if self._h.shape[0] != count and not (count == 0 and self._h.size == 0):
            raise DimensionError(f"{self._h.shape[0]} vectors but {count} labels.")

        if self._x1.size != count or self._x2.size != count:
            raise DimensionError("Variable values must be given for every vector.")

        for array in (self._h, self._labels, self._x1, self._x2):
            array.setflags(write=False)

    @classmethod
    def empty(cls, dim: int) -> Dataset:
        return cls(np.zeros((0, dim)), [], [], [])

    @property
    def h(self) -> NDArray[np.float64]:
        return self._h

    @property
    def labels(self) -> NDArray[np.int64]:
        return self._labels

    @property
    def x1(self) -> NDArray[np.float64]:
        return self._x1

    @property
    def x2(self) -> NDArray[np.float64]:
        return self._x2

    @property
    def dim(self) -> int:
        return self._h.shape[1]

    @property
    def classes(self) -> AbstractSet[int]:
        return frozenset(map(int, np.unique(self._labels)))

    def subset(self, indices: ArrayLike) -> Dataset:
        index = np.asarray(indices, dtype=np.int64)

        return Dataset(self._h[index].reshape(-1, self.dim), self._labels[index], self._x1[index], self._x2[index])

    def indices_of(self, classes: Iterable[int]) -> NDArray[np.int64]:
        return np.nonzero(np.isin(self._labels, list(classes)))[0]

    def of_classes(self, classes: Iterable[int]) -> Dataset:
        return self.subset(self.indices_of(classes))

    def __len__(self) -> int:
        return self._labels.size

    @overload
    def __getitem__(self, index: int) -> LabeledRep:
        ...

    @overload
    def __getitem__(self, index: slice) -> Dataset:
        ...

    def __getitem__(self, index: Union[int, slice]) -> Union[LabeledRep, Dataset]:
        if isinstance(index, slice):
            return self.subset(np.arange(len(self))[index])

        return LabeledRep(self._h[index], int(self._labels[index]), float(self._x1[index]), float(self._x2[index]))

    def __iter__(self) -> Iterator[LabeledRep]:
        for i in range(len(self)):
            yield self[i]

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, dim={self.dim}, classes={sorted(self.classes)})"


def _feature_noise(rng: Rng, count: int, sd: float, correlation: float) -> NDArray[np.float64]:
    # Closed-form Cholesky factor of sd^2 * [[1, rho], [rho, 1]]; valid for sd = 0 as well.
    factor = sd * np.array([[1.0, 0.0], [correlation, math.sqrt(1.0 - correlation ** 2)]])

    return rng.normal(0.0, 1.0, (count, 2)) @ factor.T


def generate_dataset(config: DatasetConfig) -> Dataset:
    grid = config.grid
    count = config.samples_per_class

    rng = Rng(config.seed)

    blocks = []

    for (label, (x1, x2)) in enumerate(grid.points):
        # Every class draws from its own stream so classes can be generated independently.
        stream = rng.derive(label)

        features = np.array([x1, x2]) + _feature_noise(stream, count, config.noise_sd, config.cov_param)
        extra = stream.normal(0.0, 1.0, (count, config.extra_dims))

        blocks.append(np.hstack((features, extra)))

    if count == 0:
        return Dataset.empty(config.dim)

    labels = np.repeat(np.arange(len(grid)), count)
    values = np.array(grid.points)[labels]

    return Dataset(np.vstack(blocks), labels, values[:, 0], values[:, 1])


@dataclass(frozen=True)
class Partition:
    name: PartitionName

    included_classes: AbstractSet[int]


@dataclass(frozen=True)
class PartitionSplit:
    partition: Partition

    train: NDArray[np.int64] = field(repr=False)

    validation: NDArray[np.int64] = field(repr=False)

    @property
    def name(self) -> PartitionName:
        return self.partition.name

    @property
    def classes(self) -> AbstractSet[int]:
        return self.partition.included_classes


def train_validation_split(indices: ArrayLike, rng: Rng,
                           train_fraction: float = default_train_fraction) -> Tuple[NDArray[np.int64], NDArray[np.int64]]:
    index = np.asarray(indices, dtype=np.int64)

    if not 0 < train_fraction <= 1:
        raise ConfigurationError(f"Train fraction must lie in (0, 1]: {train_fraction}")

    shuffled = index[rng.permutation(index.size)]
    cut = int(round(train_fraction * index.size))

    return np.sort(shuffled[:cut]), np.sort(shuffled[cut:])


def split_partitions(dataset: Dataset, scheme: Scheme, seed: int = 0,
                     train_fraction: float = default_train_fraction) -> Tuple[PartitionSplit, PartitionSplit]:
    present = dataset.classes

    if scheme == Scheme.Default:
        if len(present) < 3:
            raise PartitionError(f"The default scheme needs at least 3 classes, got {len(present)}.")

        withheld = dict(map(lambda kv: (PartitionName[kv[0]], kv[1]), default_withheld.items()))

        if not all(map(lambda w: w <= present, withheld.values())):
            # Generic grids: withhold the second and the second-to-last present class from alternate partitions.
            ordered = sorted(present)
            withheld = {
                PartitionName.DefaultP1: frozenset({ordered[1]}),
                PartitionName.DefaultP2: frozenset({ordered[-2]})
            }

        partitions = tuple(map(lambda kv: Partition(kv[0], frozenset(present - kv[1])), withheld.items()))
    elif scheme == Scheme.OOD:
        required = dense_classes | sparse_classes

        if not required <= present:
            raise PartitionError(f"The OOD scheme needs classes {sorted(required)}, got {sorted(present)}.")

        partitions = (Partition(PartitionName.Dense, dense_classes), Partition(PartitionName.Sparse, sparse_classes))
    else:
        raise PartitionError(f"Unknown partition scheme: {scheme}")

    rng = Rng(seed)

    def split(index: int, partition: Partition) -> PartitionSplit:
        (train, validation) = train_validation_split(
            dataset.indices_of(partition.included_classes), rng.derive(index), train_fraction)

        return PartitionSplit(partition, train, validation)

    (first, second) = partitions

    return split(0, first), split(1, second)


def write_csv(dataset: Dataset, path: Path) -> None:
    header = list(csv_fixed_columns) + [f"h_{i}" for i in range(dataset.dim)]

    with open(path, "w", encoding="utf-8", newline="") as fout:
        writer = csv.writer(fout)
        writer.writerow(header)

        for rep in dataset:
            writer.writerow([rep.class_label, repr(rep.x1), repr(rep.x2)] + list(map(repr, map(float, rep.h))))


def read_csv(path: Path) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as fin:
        reader = csv.reader(fin)

        try:
            header = next(reader)
        except StopIteration:
            raise ConfigurationError(f"Dataset file has no header row: {path}") from None

        if tuple(header[:3]) != csv_fixed_columns:
            raise ConfigurationError(f"Unexpected dataset header in {path}: {header[:3]}")

        dim = len(header) - 3
        rows = list(reader)

    if not rows:
        return Dataset.empty(dim)

    table = np.array(rows, dtype=float)

    return Dataset(table[:, 3:], table[:, 0].astype(np.int64), table[:, 1], table[:, 2])


def class_means(dataset: Dataset) -> Optional[NDArray[np.float64]]:
    if not len(dataset):
        return None

    classes = sorted(dataset.classes)

    return np.vstack(list(map(lambda c: dataset.h[dataset.labels == c].mean(axis=0), classes)))
