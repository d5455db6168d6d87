from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Callable, Dict, Final, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from sklearn.neighbors import NearestNeighbors

from divlab.errors import (
    ConfigurationError, CosineUndefinedError, DimensionError, EmptyInputError, SingularSystemError, check_dimension
)
from divlab.numerics import PcaBasis, Rng, as_matrix, default_blur, min_cost_matching, pca, rank_for_variance, \
    sinkhorn_divergence

default_neighbors: Final = 10
default_var_threshold: Final = 0.95
default_tikhonov: Final = 1e-3
default_max_samples: Final = 1000

# Norms below this make cosine distances undefined.
zero_norm: Final = 1e-12

Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]


class Metric(Enum):
    Cosine: Final = "cosine"
    L2: Final = "l2"


@dataclass(frozen=True)
class ComparisonSet:
    natural: Matrix

    intervened: Matrix

    ground_truth: Matrix

    def __post_init__(self) -> None:
        natural = as_matrix("Natural set", self.natural)
        intervened = np.array(self.intervened, dtype=float, ndmin=2)
        truth = np.array(self.ground_truth, dtype=float, ndmin=2)

        if intervened.shape[0] != truth.shape[0]:
            raise DimensionError(f"{intervened.shape[0]} intervened vectors but {truth.shape[0]} ground-truth pairs.")

        for (name, array) in (("Intervened set", intervened), ("Ground-truth set", truth)):
            if array.size:
                check_dimension(name, array.shape[1], natural.shape[1])

        object.__setattr__(self, "natural", natural)
        object.__setattr__(self, "intervened", intervened)
        object.__setattr__(self, "ground_truth", truth)


@dataclass(frozen=True)
class DivergenceReport:
    emd: float

    baseline_emd: float

    row_emd: float

    nearest_cos: float

    nearest_l2: float

    min_cos_pairing: float

    min_l2_pairing: float

    local_pca: float

    llr: float

    kde_neg_log: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, values: Dict[str, float]) -> DivergenceReport:
        names = [f.name for f in fields(cls)]

        if set(values) != set(names):
            raise ConfigurationError(f"Report keys {sorted(values)} do not match {names}.")

        return cls(**{k: float(values[k]) for k in names})

    @classmethod
    def from_json(cls, text: str) -> DivergenceReport:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ReportParams:
    blur: float = default_blur

    causal_dims: Tuple[int, ...] = (0, 1)

    # Row EMD is divided by this when positive.
    row_scale: float = 0.0

    neighbors: int = default_neighbors

    var_threshold: float = default_var_threshold

    tikhonov: float = default_tikhonov

    # None selects Silverman's rule.
    bandwidth: Optional[float] = None

    max_samples: int = default_max_samples

    seed: int = 0


def emd_divergence(natural: ArrayLike, compared: ArrayLike, blur: float = default_blur) -> float:
    return sinkhorn_divergence(as_matrix("Natural set", natural), as_matrix("Compared set", compared), blur)


def row_emd(natural: ArrayLike, compared: ArrayLike, causal_dims: Sequence[int], scale: float = 0.0,
            blur: float = default_blur) -> float:
    dims = list(causal_dims)

    if not dims:
        raise EmptyInputError("Row EMD needs at least one causal dimension.")

    a = as_matrix("Natural set", natural)
    b = as_matrix("Compared set", compared)

    value = sinkhorn_divergence(a[:, dims], b[:, dims], blur)

    return value / scale if scale > 0 else value


def _distances(a: Matrix, b: Matrix, metric: Metric) -> Matrix:
    check_dimension("Compared set", b.shape[1], a.shape[1])

    if metric == Metric.L2:
        return cdist(a, b, "euclidean")

    if np.any(np.linalg.norm(a, axis=1) < zero_norm) or np.any(np.linalg.norm(b, axis=1) < zero_norm):
        raise CosineUndefinedError("Cosine distance is undefined for a zero vector.")

    return cdist(a, b, "cosine")


def nearest_distance(reference: ArrayLike, queries: ArrayLike, metric: Metric) -> float:
    """Mean distance from each query to its nearest reference point."""

    distances = _distances(as_matrix("Reference set", reference), as_matrix("Query set", queries), metric)

    return float(np.mean(distances.min(axis=0)))


def min_cost_pairing_distance(a: ArrayLike, b: ArrayLike, metric: Metric) -> float:
    """Average cost of the best one-to-one pairing of two equally sized sets."""

    first = as_matrix("First set", a)
    second = as_matrix("Second set", b)

    if first.shape[0] != second.shape[0]:
        raise DimensionError(f"Pairing needs equal set sizes, got {first.shape[0]} and {second.shape[0]}.")

    (_, total) = min_cost_matching(_distances(first, second, metric))

    return total / first.shape[0]


class LocalTangentModel:
    """Reference set with lazily built k-neighborhood tangent bases for each reference point."""

    def __init__(self, reference: ArrayLike, k: int = default_neighbors,
                 var_threshold: float = default_var_threshold) -> None:
        self._points = as_matrix("Reference set", reference)

        if k < 2:
            raise ConfigurationError(f"Local PCA needs at least two neighbors, got k={k}.")

        if k > self._points.shape[0]:
            raise ConfigurationError(f"k={k} exceeds the {self._points.shape[0]} reference points.")

        if not 0 < var_threshold <= 1:
            raise ConfigurationError(f"Variance threshold must lie in (0, 1]: {var_threshold}")

        self._k = k
        self._threshold = var_threshold
        self._index = NearestNeighbors(n_neighbors=k).fit(self._points)
        self._bases: Dict[int, PcaBasis] = {}

    @property
    def points(self) -> Matrix:
        return self._points

    @property
    def k(self) -> int:
        return self._k

    def neighbors(self, v: ArrayLike) -> NDArray[np.int64]:
        query = np.asarray(v, dtype=float).reshape(1, -1)

        check_dimension("Query", query.shape[1], self._points.shape[1])

        return self._index.kneighbors(query, n_neighbors=self._k, return_distance=False)[0]

    def basis(self, i: int) -> PcaBasis:
        if i not in self._bases:
            neighborhood = self._points[self.neighbors(self._points[i])]
            full = pca(neighborhood, self._points.shape[1])

            self._bases[i] = full.truncate(rank_for_variance(full, self._threshold))

        return self._bases[i]

    def distance(self, v: ArrayLike) -> float:
        query = np.asarray(v, dtype=float)

        def residual(i: int) -> float:
            offset = query - self._points[i]
            q = self.basis(i).components

            return float(np.linalg.norm(offset - q @ (q.T @ offset)))

        return min(map(residual, map(int, self.neighbors(query))))


def local_pca_distance(reference: ArrayLike, v: ArrayLike, k: int = default_neighbors,
                       var_threshold: float = default_var_threshold) -> float:
    return LocalTangentModel(reference, k, var_threshold).distance(v)


class LocalReconstruction:
    """Reference set indexed once for locally linear reconstruction of query vectors."""

    def __init__(self, reference: ArrayLike, k: int = default_neighbors, tikhonov: float = default_tikhonov) -> None:
        self._points = as_matrix("Reference set", reference)

        if k < 1:
            raise ConfigurationError(f"LLR needs at least one neighbor, got k={k}.")

        self._k = min(k, self._points.shape[0])
        self._tikhonov = tikhonov
        self._index = NearestNeighbors(n_neighbors=self._k).fit(self._points)

    @property
    def k(self) -> int:
        return self._k

    def error(self, v: ArrayLike) -> float:
        """Distance between v and the affine combination of its k nearest references that best reconstructs it."""

        query = np.asarray(v, dtype=float).ravel()

        check_dimension("Query", query.size, self._points.shape[1])

        neighbors = self._points[self._index.kneighbors(query.reshape(1, -1), return_distance=False)[0]]

        centered = neighbors - query
        gram = centered @ centered.T + self._tikhonov * np.eye(self._k)

        try:
            weights = linalg.solve(gram, np.ones(self._k), assume_a="sym")
        except linalg.LinAlgError as e:
            raise SingularSystemError(f"Local Gram system is singular: {e}") from e

        total = float(weights.sum())

        if not np.all(np.isfinite(weights)) or abs(total) < zero_norm:
            raise SingularSystemError("Local reconstruction weights cannot be normalized.")

        return float(np.linalg.norm(query - (weights / total) @ neighbors))


def llr_error(reference: ArrayLike, v: ArrayLike, k: int = default_neighbors,
              tikhonov: float = default_tikhonov) -> float:
    return LocalReconstruction(reference, k, tikhonov).error(v)


def silverman_bandwidth(reference: ArrayLike) -> float:
    points = as_matrix("Reference set", reference)
    (n, d) = points.shape

    if n < 2:
        raise ConfigurationError("Silverman's rule needs at least two reference points.")

    sigma = float(np.mean(np.std(points, axis=0, ddof=1)))

    if sigma <= 0:
        raise ConfigurationError("Silverman's rule is undefined for a reference set without spread.")

    return sigma * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kde_neg_log_density(reference: ArrayLike, v: ArrayLike, bandwidth: Optional[float] = None) -> float:
    """-log of (1 / (n h^D)) sum exp(-|v - x_i|^2 / 2h^2), evaluated in the log domain."""

    points = as_matrix("Reference set", reference)
    query = np.asarray(v, dtype=float).reshape(1, -1)

    check_dimension("Query", query.shape[1], points.shape[1])

    h = silverman_bandwidth(points) if bandwidth is None else bandwidth

    if h <= 0:
        raise ConfigurationError(f"Bandwidth must be positive: {h}")

    (n, d) = points.shape

    exponents = -cdist(query, points, "sqeuclidean")[0] / (2.0 * h * h)

    return -(float(logsumexp(exponents)) - math.log(n) - d * math.log(h))


def _sample(rows: Matrix, count: int, rng: Rng) -> Matrix:
    if rows.shape[0] <= count:
        return rows

    return rows[np.sort(rng.permutation(rows.shape[0])[:count])]


def full_report(cmp: ComparisonSet, params: ReportParams = ReportParams()) -> DivergenceReport:
    if cmp.intervened.shape[0] == 0:
        raise EmptyInputError("A divergence report needs at least one intervened vector.")

    rng = Rng(params.seed, 3)

    natural = _sample(cmp.natural, params.max_samples, rng.derive(0))

    keep = np.arange(cmp.intervened.shape[0])

    if keep.size > params.max_samples:
        keep = np.sort(rng.derive(1).permutation(keep.size)[:params.max_samples])

    intervened = cmp.intervened[keep]
    truth = cmp.ground_truth[keep]

    paired = min(natural.shape[0], intervened.shape[0])

    tangent = LocalTangentModel(natural, min(params.neighbors, natural.shape[0]), params.var_threshold)
    reconstruction = LocalReconstruction(natural, params.neighbors, params.tikhonov)
    bandwidth = silverman_bandwidth(natural) if params.bandwidth is None else params.bandwidth

    def mean_over(fn: Callable[[Vector], float]) -> float:
        return float(np.mean(list(map(fn, intervened))))

    return DivergenceReport(
        emd=emd_divergence(natural, intervened, params.blur),
        baseline_emd=emd_divergence(natural, truth, params.blur),
        row_emd=row_emd(natural, intervened, params.causal_dims, params.row_scale, params.blur),
        nearest_cos=nearest_distance(natural, intervened, Metric.Cosine),
        nearest_l2=nearest_distance(natural, intervened, Metric.L2),
        min_cos_pairing=min_cost_pairing_distance(natural[:paired], intervened[:paired], Metric.Cosine),
        min_l2_pairing=min_cost_pairing_distance(natural[:paired], intervened[:paired], Metric.L2),
        local_pca=mean_over(tangent.distance),
        llr=mean_over(reconstruction.error),
        kde_neg_log=mean_over(lambda v: kde_neg_log_density(natural, v, bandwidth)))


@dataclass(frozen=True)
class PcaScatter:
    """Top-two principal coordinates of natural and intervened vectors projected together."""

    kinds: List[str]

    labels: NDArray[np.int64]

    coordinates: Matrix

    def rows(self) -> List[Tuple[str, int, float, float]]:
        return list(map(lambda i: (self.kinds[i], int(self.labels[i]), float(self.coordinates[i, 0]),
                                   float(self.coordinates[i, 1])), range(len(self.kinds))))


def pca_scatter(natural: ArrayLike, intervened: ArrayLike, natural_labels: Optional[ArrayLike] = None,
                intervened_labels: Optional[ArrayLike] = None) -> PcaScatter:
    a = as_matrix("Natural set", natural)
    b = as_matrix("Intervened set", intervened)

    joint = np.vstack((a, b))
    basis = pca(joint, 2)

    coordinates = np.zeros((joint.shape[0], 2))
    coordinates[:, :basis.rank] = basis.project(joint)

    def labels_of(values: Optional[ArrayLike], count: int) -> NDArray[np.int64]:
        return np.full(count, -1, dtype=np.int64) if values is None else np.asarray(values, dtype=np.int64).ravel()

    labels = np.concatenate((labels_of(natural_labels, a.shape[0]), labels_of(intervened_labels, b.shape[0])))

    return PcaScatter(["natural"] * a.shape[0] + ["intervened"] * b.shape[0], labels, coordinates)
