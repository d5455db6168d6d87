from __future__ import annotations

import math
from dataclasses import dataclass
from io import StringIO
from typing import Final, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from scipy.stats import f as f_distribution

from divlab.errors import ConvergenceError, DegenerateDesignError, DimensionError, EmptyInputError, check_dimension

Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]

default_blur: Final = 0.05
default_scaling: Final = 0.9
default_tolerance: Final = 1e-6
default_max_iterations: Final = 500
default_stage_iterations: Final = 100


class Rng:
    """
    Deterministic pseudo-random stream.

    A stream is keyed by ``(seed, *stream)`` through numpy's ``SeedSequence`` and drawn from
    the counter-based Philox generator. Identical keys replay identical numbers, and
    ``derive`` hands out independent streams for parallel workers.
    """

    def __init__(self, seed: int, *stream: int) -> None:
        if seed < 0 or any(map(lambda s: s < 0, stream)):
            raise ValueError(f"Seeds and stream keys must be non-negative: {(seed, *stream)}")

        self._seed = seed
        self._stream = tuple(stream)
        self._generator = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *stream))))

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def stream(self) -> Tuple[int, ...]:
        return self._stream

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def derive(self, *stream: int) -> Rng:
        return Rng(self.seed, *self.stream, *stream)

    def normal(self, mean: float = 0.0, sd: float = 1.0, size: Tuple[int, ...] = ()) -> NDArray[np.float64]:
        return self._generator.normal(mean, sd, size)

    def uniform(self, size: Tuple[int, ...] = ()) -> NDArray[np.float64]:
        return self._generator.random(size)

    def integers(self, high: int, size: Tuple[int, ...] = ()) -> NDArray[np.int64]:
        return self._generator.integers(0, high, size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self._generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng{(self.seed, *self.stream)}"


def gaussian_matrix(rng: Rng, rows: int, cols: int, mean: float = 0.0, sd: float = 1.0) -> Matrix:
    if sd < 0:
        raise ValueError(f"Standard deviation must be non-negative: {sd}")

    if sd == 0:
        return np.full((rows, cols), float(mean))

    return rng.normal(mean, sd, (rows, cols))


def as_matrix(name: str, values: ArrayLike) -> Matrix:
    array = np.asarray(values, dtype=float)

    if array.ndim == 1 and array.size == 0:
        raise EmptyInputError(f"{name} is empty.")

    if array.ndim != 2:
        raise DimensionError(f"{name} must be a matrix of row vectors, got shape {array.shape}.")

    if array.shape[0] == 0:
        raise EmptyInputError(f"{name} is empty.")

    return array


@dataclass(frozen=True)
class PcaBasis:
    mean: Vector

    components: Matrix

    explained_variance: Vector

    total_variance: float

    @property
    def rank(self) -> int:
        return self.components.shape[1]

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def project(self, x: ArrayLike) -> NDArray[np.float64]:
        return (np.asarray(x, dtype=float) - self.mean) @ self.components

    def reconstruct(self, x: ArrayLike) -> NDArray[np.float64]:
        return self.mean + self.project(x) @ self.components.T

    def residual(self, x: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(x, dtype=float) - self.reconstruct(x)

    def truncate(self, rank: int) -> PcaBasis:
        rank = max(0, min(rank, self.rank))

        return PcaBasis(self.mean, self.components[:, :rank], self.explained_variance[:rank], self.total_variance)


def pca(points: ArrayLike, rank: int) -> PcaBasis:
    data = as_matrix("PCA input", points)

    if rank < 0:
        raise ValueError(f"PCA rank must be non-negative: {rank}")

    (n, d) = data.shape

    mean = data.mean(axis=0)
    count = min(rank, d, n - 1)

    if n < 2:
        return PcaBasis(mean, np.zeros((d, 0)), np.zeros(0), 0.0)

    centered = data - mean
    covariance = centered.T @ centered / (n - 1)

    total = float(np.trace(covariance))

    if count == 0:
        return PcaBasis(mean, np.zeros((d, 0)), np.zeros(0), total)

    (values, vectors) = linalg.eigh(covariance)

    order = np.argsort(values)[::-1][:count]

    values = np.clip(values[order], 0.0, None)
    vectors = vectors[:, order]

    # Sign convention: the largest-magnitude entry of every component is positive.
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(count)])
    signs[signs == 0] = 1.0

    return PcaBasis(mean, vectors * signs, values, total)


def rank_for_variance(basis: PcaBasis, threshold: float) -> int:
    """Smallest number of leading components explaining at least ``threshold`` of the total variance."""
    if basis.total_variance <= 0 or basis.rank == 0:
        return 0

    cumulative = np.cumsum(basis.explained_variance)
    target = threshold * basis.total_variance * (1.0 - 1e-12)

    reached = np.nonzero(cumulative >= target)[0]

    return int(reached[0]) + 1 if reached.size else basis.rank


def _epsilon_schedule(a: Matrix, b: Matrix, blur: float, p: int, scaling: float) -> Sequence[float]:
    joint = np.vstack((a, b))
    diameter = float(np.linalg.norm(joint.max(axis=0) - joint.min(axis=0)))

    target = blur ** p

    schedule = []
    epsilon = diameter ** p

    while epsilon > target:
        schedule.append(epsilon)
        epsilon *= scaling ** p

    schedule.append(target)

    return schedule


def _entropic_transport(x: Matrix, y: Matrix, schedule: Sequence[float], p: int, tolerance: float,
                        max_iterations: int, stage_iterations: int) -> float:
    cost = cdist(x, y, "sqeuclidean") / p

    (n, m) = cost.shape

    log_a = np.full(n, -math.log(n))
    log_b = np.full(m, -math.log(m))

    def update_f(g: Vector, epsilon: float) -> Vector:
        return -epsilon * logsumexp(log_b[None, :] + (g[None, :] - cost) / epsilon, axis=1)

    def update_g(f: Vector, epsilon: float) -> Vector:
        return -epsilon * logsumexp(log_a[:, None] + (f[:, None] - cost) / epsilon, axis=0)

    def iterate(f: Vector, epsilon: float, budget: int) -> Tuple[Vector, Vector, float, bool]:
        g = np.zeros(m)
        residual = math.inf

        for _ in range(budget):
            g = update_g(f, epsilon)
            f_next = update_f(g, epsilon)

            # Columns of the plan (f, g) are exact; its rows sum to a * exp((f - f_next) / epsilon).
            residual = float(np.linalg.norm(np.exp(log_a) * np.expm1((f - f_next) / epsilon)))

            if residual < tolerance:
                return f, g, residual, True

            f = f_next

        return f, g, residual, False

    f = np.zeros(n)

    # Epsilon-scaling: each stage is solved warm from the previous one before the target stage.
    for epsilon in schedule[:-1]:
        (f, _, _, _) = iterate(f, epsilon, stage_iterations)

    (f, g, residual, converged) = iterate(f, schedule[-1], max_iterations)

    if not converged:
        raise ConvergenceError(
            f"Sinkhorn iterations did not converge within {max_iterations} steps (residual {residual:.3e}).",
            residual, max_iterations)

    return float(np.exp(log_a) @ f + np.exp(log_b) @ g)


def sinkhorn_divergence(a: ArrayLike, b: ArrayLike, blur: float = default_blur, p: int = 2,
                        scaling: float = default_scaling, tolerance: float = default_tolerance,
                        max_iterations: int = default_max_iterations,
                        stage_iterations: int = default_stage_iterations) -> float:
    """
    Debiased entropic optimal-transport divergence between two uniformly weighted point sets.

    ``S(a, b) = OT(a, b) - OT(a, a) / 2 - OT(b, b) / 2`` with ground cost ``|x - y|^p / p`` and
    regularization ``blur^p``. Each transport problem is solved in the log domain with
    epsilon-scaling: the temperature decays geometrically from the squared diameter of the joint
    support, by ``scaling^p`` per stage, and every stage runs up to ``stage_iterations`` updates
    before warm-starting the next. The target stage is then iterated until the marginal residual
    (Euclidean norm of the row-marginal error) drops below ``tolerance``.
    """
    x = as_matrix("First point set", a)
    y = as_matrix("Second point set", b)

    check_dimension("Second point set", y.shape[1], x.shape[1])

    if p != 2:
        raise ValueError(f"Only the quadratic ground cost (p=2) is supported, got p={p}.")

    if blur <= 0:
        raise ValueError(f"Blur must be positive: {blur}")

    if not 0 < scaling < 1:
        raise ValueError(f"Scaling must lie in (0, 1): {scaling}")

    if max_iterations < 1 or stage_iterations < 0:
        raise ValueError(f"Iteration budgets must be positive: {(max_iterations, stage_iterations)}")

    schedule = _epsilon_schedule(x, y, blur, p, scaling)

    def transport(u: Matrix, v: Matrix) -> float:
        return _entropic_transport(u, v, schedule, p, tolerance, max_iterations, stage_iterations)

    return transport(x, y) - 0.5 * transport(x, x) - 0.5 * transport(y, y)


@dataclass(frozen=True)
class OlsFit:
    intercept: float

    coefficient: float

    r_squared: float

    f_statistic: float

    p_value: float

    n_observations: int

    adj_r_squared: float

    std_error: float

    t_statistic: float

    log_likelihood: float

    aic: float

    bic: float


def ols_fit(x: ArrayLike, y: ArrayLike) -> OlsFit:
    xs = np.asarray(x, dtype=float).ravel()
    ys = np.asarray(y, dtype=float).ravel()

    check_dimension("Response", ys.size, xs.size, "observations")

    n = xs.size

    if n < 3:
        raise DegenerateDesignError(f"Simple regression needs at least 3 observations, got {n}.")

    if np.ptp(xs) == 0:
        raise DegenerateDesignError("The regressor is constant.")

    dx = xs - xs.mean()
    dy = ys - ys.mean()

    sxx = float(dx @ dx)

    coefficient = float(dx @ dy) / sxx
    intercept = float(ys.mean() - coefficient * xs.mean())

    residuals = ys - (intercept + coefficient * xs)

    ssr = float(residuals @ residuals)
    sst = float(dy @ dy)

    dof = n - 2

    if sst == 0:
        (r_squared, f_statistic, p_value) = (0.0, 0.0, 1.0)
    elif ssr == 0:
        (r_squared, f_statistic, p_value) = (1.0, math.inf, 0.0)
    else:
        r_squared = min(1.0, max(0.0, 1.0 - ssr / sst))
        f_statistic = (sst - ssr) / (ssr / dof)
        p_value = float(f_distribution.sf(f_statistic, 1, dof))

    std_error = math.sqrt(ssr / dof / sxx)

    if std_error > 0:
        t_statistic = coefficient / std_error
    else:
        t_statistic = math.copysign(math.inf, coefficient) if coefficient != 0 else 0.0

    log_likelihood = -0.5 * n * (math.log(2 * math.pi) + math.log(ssr / n) + 1) if ssr > 0 else math.inf

    return OlsFit(
        intercept=intercept,
        coefficient=coefficient,
        r_squared=r_squared,
        f_statistic=f_statistic,
        p_value=p_value,
        n_observations=n,
        adj_r_squared=1.0 - (1.0 - r_squared) * (n - 1) / dof,
        std_error=std_error,
        t_statistic=t_statistic,
        log_likelihood=log_likelihood,
        aic=-2 * log_likelihood + 4,
        bic=-2 * log_likelihood + 2 * math.log(n))


def format_ols_table(fit: OlsFit, dependent: str = "IIA", independent: str = "EMD") -> str:
    out = StringIO()

    rows = (
        ("Dep. Variable:", dependent, "R-squared:", f"{fit.r_squared:.3f}"),
        ("Model:", "OLS", "Adj. R-squared:", f"{fit.adj_r_squared:.3f}"),
        ("Method:", "Least Squares", "F-statistic:", f"{fit.f_statistic:.2f}"),
        ("No. Observations:", str(fit.n_observations), "Prob (F-statistic):", f"{fit.p_value:.2e}"),
        ("Df Residuals:", str(fit.n_observations - 2), "Log-Likelihood:", f"{fit.log_likelihood:.3f}"),
        ("Df Model:", "1", "AIC:", f"{fit.aic:.1f}"),
        ("", "", "BIC:", f"{fit.bic:.1f}"))

    for (k1, v1, k2, v2) in rows:
        out.write(f"{k1:<20}{v1:>16}   {k2:<20}{v2:>12}\n")

    out.write("\n")
    out.write(f"{'':<14}{'coef':>12}{'std err':>12}{'t':>12}\n")
    out.write(f"{'const':<14}{fit.intercept:>12.4f}{'':>12}{'':>12}\n")
    out.write(f"{independent:<14}{fit.coefficient:>12.4f}{fit.std_error:>12.4f}{fit.t_statistic:>12.3f}\n")

    return out.getvalue()


def min_cost_matching(cost: ArrayLike) -> Tuple[NDArray[np.int64], float]:
    matrix = np.asarray(cost, dtype=float)

    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionError(f"Matching needs a square cost matrix, got shape {matrix.shape}.")

    if not np.all(np.isfinite(matrix)):
        raise ValueError("Matching costs must be finite.")

    (rows, cols) = linear_sum_assignment(matrix)

    return cols.astype(np.int64), float(matrix[rows, cols].sum())
