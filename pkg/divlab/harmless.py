from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Final, List, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from sklearn.neighbors import NearestNeighbors

from divlab.errors import ConfigurationError, DimensionError, check_dimension
from divlab.neural import Mlp, forward
from divlab.numerics import as_matrix, pca
from divlab.pathology import PiecewiseLinearCircuit, circuit_forward

Vector = NDArray[np.float64]

Behavior = Callable[[Vector], ArrayLike]


class Verdict(Enum):
    Harmless: Final = "harmless"
    Harmful: Final = "harmful"


@dataclass(frozen=True)
class HarmlessVerdict:
    verdict: Verdict

    divergence_vector: Vector

    max_delta: float

    per_eval_deltas: List[float]

    n: int

    r: int

    epsilon: float

    @property
    def harmless(self) -> bool:
        return self.verdict == Verdict.Harmless

    def to_dict(self) -> Dict[str, object]:
        return {
            "verdict": self.verdict.value,
            "divergence_vector": list(map(float, self.divergence_vector)),
            "max_delta": self.max_delta,
            "per_eval_deltas": self.per_eval_deltas,
            "n": self.n,
            "r": self.r,
            "epsilon": self.epsilon
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def local_projection(x_hat: ArrayLike, class_naturals: ArrayLike, n: int, r: int) -> Vector:
    """Projection of x_hat onto the rank-r PCA subspace of its n nearest class naturals."""

    naturals = as_matrix("Class naturals", class_naturals)
    query = np.asarray(x_hat, dtype=float).ravel()

    check_dimension("Divergent vector", query.size, naturals.shape[1])

    if n < 2:
        raise ConfigurationError(f"The neighborhood needs at least two points, got n={n}.")

    if n > naturals.shape[0]:
        raise ConfigurationError(f"n={n} exceeds the {naturals.shape[0]} class naturals.")

    if r < 0:
        raise ConfigurationError(f"The subspace rank must be non-negative: {r}")

    index = NearestNeighbors(n_neighbors=n).fit(naturals)
    neighbors = naturals[index.kneighbors(query.reshape(1, -1), return_distance=False)[0]]

    return pca(neighbors, r).reconstruct(query)


def classify_divergence(x_hat: ArrayLike, class_naturals: ArrayLike, eval_set: ArrayLike, psi: Behavior,
                        n: int, r: int, epsilon: float) -> HarmlessVerdict:
    """Harmless when shifting every evaluation input by the off-manifold part of x_hat moves psi by at most epsilon."""

    if epsilon < 0:
        raise ConfigurationError(f"Tolerance must be non-negative: {epsilon}")

    inputs = as_matrix("Evaluation set", eval_set)
    query = np.asarray(x_hat, dtype=float).ravel()

    v = query - local_projection(query, class_naturals, n, r)

    check_dimension("Evaluation set", inputs.shape[1], v.size)

    def delta(x: Vector) -> float:
        before = np.asarray(psi(x), dtype=float)
        after = np.asarray(psi(x + v), dtype=float)

        if before.shape != after.shape:
            raise DimensionError(f"Behavior outputs differ in shape: {before.shape} and {after.shape}.")

        return float(np.linalg.norm(after - before))

    deltas = list(map(delta, inputs))
    worst = max(deltas)

    verdict = Verdict.Harmless if worst <= epsilon else Verdict.Harmful

    return HarmlessVerdict(verdict, v, worst, deltas, n, r, epsilon)


def circuit_behavior(c: PiecewiseLinearCircuit, context: Optional[ArrayLike] = None) -> Behavior:
    """The circuit's output vector (score or logits) as a behavior function."""

    return lambda h: circuit_forward(c, h, context)[0].outputs


def mlp_behavior(model: Mlp) -> Behavior:
    """Logits of a frozen model, so near-boundary shifts stay visible."""

    return lambda h: forward(model, h).logits[0]
