from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Final, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from divlab.errors import CosineUndefinedError, DimensionError, EmptyInputError, MissingClError
from divlab.synthdata import Dataset

if TYPE_CHECKING:
    from divlab.alignment import AlignmentFunction, VariableSelector

# Norms below this make the cosine term undefined.
zero_norm: Final = 1e-12

Key = Tuple[float, float]
Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]


class ClIndex(Mapping[Key, Matrix]):
    """Natural vectors grouped by their ground-truth (x1, x2) values."""

    def __init__(self, groups: Mapping[Key, ArrayLike]) -> None:
        self._groups: Dict[Key, Matrix] = {}
        self._means: Dict[Key, Vector] = {}

        for (key, vectors) in groups.items():
            array = np.array(vectors, dtype=float, ndmin=2)
            array.setflags(write=False)

            self._groups[(float(key[0]), float(key[1]))] = array

        dims = set(map(lambda v: v.shape[1], self._groups.values()))

        if len(dims) > 1:
            raise DimensionError(f"Natural vectors of differing dimensions: {sorted(dims)}")

    @classmethod
    def from_dataset(cls, dataset: Dataset, indices: Optional[ArrayLike] = None) -> ClIndex:
        pool = dataset if indices is None else dataset.subset(indices)

        keys = sorted(set(zip(pool.x1.tolist(), pool.x2.tolist())))

        def members(key: Key) -> Matrix:
            return pool.h[(pool.x1 == key[0]) & (pool.x2 == key[1])]

        return cls({k: members(k) for k in keys})

    def __getitem__(self, key: Key) -> Matrix:
        return self._groups[(float(key[0]), float(key[1]))]

    def __iter__(self) -> Iterator[Key]:
        return iter(self._groups)

    def __len__(self) -> int:
        return len(self._groups)

    def mean(self, key: Key) -> Vector:
        lookup = (float(key[0]), float(key[1]))

        if lookup not in self._means:
            group = self._groups.get(lookup)

            if group is None or group.shape[0] == 0:
                raise MissingClError(lookup)

            self._means[lookup] = group.mean(axis=0)

        return self._means[lookup]


def cl_vector(index: ClIndex, key: Key) -> Vector:
    return index.mean(key)


def cl_vectors(index: ClIndex, keys: ArrayLike) -> Matrix:
    pairs = np.asarray(keys, dtype=float).reshape(-1, 2)

    return np.vstack(list(map(lambda k: index.mean((k[0], k[1])), pairs)))


@dataclass(frozen=True)
class ClGradients:
    loss: float

    # Gradient of the batch-mean loss with respect to each intervened vector.
    h_hat: Matrix

    h_cl: Matrix

    # Gradient with respect to the alignment matrix W (modified loss only).
    weight: Optional[Matrix]

    skipped: int


def _pairwise_loss(u: Matrix, t: Matrix, strict: bool) -> Tuple[Vector, Matrix, Matrix, int]:
    if u.shape != t.shape:
        raise DimensionError(f"Intervened vectors {u.shape} and CL vectors {t.shape} differ in shape.")

    diff = u - t

    nu = np.linalg.norm(u, axis=1)
    nt = np.linalg.norm(t, axis=1)

    valid = (nu >= zero_norm) & (nt >= zero_norm)

    if strict and not np.all(valid):
        raise CosineUndefinedError("The cosine term is undefined for a zero-norm vector.")

    (su, st) = (np.where(valid, nu, 1.0), np.where(valid, nt, 1.0))

    cos = np.where(valid, np.sum(u * t, axis=1) / (su * st), 0.0)

    grad_cos_u = t / (su * st)[:, None] - (cos / su ** 2)[:, None] * u
    grad_cos_t = u / (su * st)[:, None] - (cos / st ** 2)[:, None] * t

    grad_cos_u[~valid] = 0.0
    grad_cos_t[~valid] = 0.0

    losses = 0.5 * np.sum(diff * diff, axis=1) - 0.5 * cos

    return losses, diff - 0.5 * grad_cos_u, -diff - 0.5 * grad_cos_t, int(np.count_nonzero(~valid))


def _batch(name: str, values: ArrayLike) -> Matrix:
    array = np.array(values, dtype=float, ndmin=2)

    if array.shape[0] == 0:
        raise EmptyInputError(f"{name} is empty.")

    return array


def cl_loss(h_hat: ArrayLike, h_cl: ArrayLike) -> float:
    """Half squared distance minus half cosine similarity."""

    (losses, _, _, _) = _pairwise_loss(_batch("h_hat", h_hat), _batch("h_cl", h_cl), strict=True)

    return float(losses[0]) if losses.size == 1 else float(np.mean(losses))


def cl_loss_batch(h_hat: ArrayLike, h_cl: ArrayLike, strict: bool = False) -> ClGradients:
    u = _batch("h_hat", h_hat)
    t = _batch("h_cl", h_cl)

    count = u.shape[0]

    (losses, grad_u, grad_t, skipped) = _pairwise_loss(u, t, strict)

    return ClGradients(float(np.mean(losses)), grad_u / count, grad_t / count, None, skipped)


def modified_cl_loss_batch(h_hat: ArrayLike, h_cl: ArrayLike, af: AlignmentFunction,
                           selectors: Sequence[VariableSelector], strict: bool = False) -> ClGradients:
    """Sum over selectors of the CL loss between per-subspace projections; CL targets are not differentiated."""

    u = _batch("h_hat", h_hat)
    t = _batch("h_cl", h_cl)

    count = u.shape[0]

    total = 0.0
    skipped = 0

    grad_h_hat = np.zeros_like(u)
    grad_weight = np.zeros((af.dim, af.dim))

    for selector in selectors:
        mask = selector.mask

        projected = af.project(mask, u)
        target = af.project(mask, t)

        (losses, grad_projected, _, missing) = _pairwise_loss(projected, target, strict)

        total += float(np.mean(losses))
        skipped += missing

        grad_projected /= count

        grad_h_hat += af.project_transpose(mask, grad_projected)
        grad_weight += af.projection_grad(mask, u, grad_projected)

    return ClGradients(total, grad_h_hat, np.zeros_like(t), grad_weight, skipped)


def modified_cl_loss(h_hat: ArrayLike, h_cl: ArrayLike, af: AlignmentFunction,
                     selectors: Sequence[VariableSelector]) -> float:
    return modified_cl_loss_batch(h_hat, h_cl, af, selectors, strict=True).loss
