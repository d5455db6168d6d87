from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from io import StringIO
from itertools import product
from typing import Dict, Final, Iterable, List, Mapping, Optional, Pattern, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from divlab import circuits
from divlab.errors import (
    ConfigurationError, DimensionError, EmptyInputError, MissingClassError, ModeError, check_dimension
)
from divlab.neural import Mlp, Mode, forward
from divlab.numerics import as_matrix, pca, rank_for_variance

circuit_format_version: Final = 1

# A ReLU unit counts as active above this value.
activity_threshold: Final = 1e-9

hull_tolerance: Final = 1e-8
hull_max_iterations: Final = 10_000

Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]

Point = Tuple[float, ...]


class Readout(Enum):
    ScoreSign: Final = "score_sign"
    ArgmaxFirstIndex: Final = "argmax_first_index"


@dataclass(frozen=True)
class Layer:
    weight: Matrix

    bias: Vector

    relu: bool

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class PiecewiseLinearCircuit:
    """Affine layers with optional ReLUs; a context vector may be added to the output of one layer."""

    name: str

    layers: Tuple[Layer, ...]

    readout: Readout

    class_names: Tuple[str, ...]

    context_layer: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigurationError(f"Circuit {self.name} has no layers.")

        for (i, (first, second)) in enumerate(zip(self.layers, self.layers[1:])):
            check_dimension(f"Layer {i + 1} of {self.name}", second.in_dim, first.out_dim, "inputs")

        for (i, layer) in enumerate(self.layers):
            check_dimension(f"Bias of layer {i} of {self.name}", layer.bias.size, layer.out_dim, "entries")

        if self.context_layer is not None and not 0 <= self.context_layer < len(self.layers):
            raise ConfigurationError(f"Context layer {self.context_layer} does not exist in {self.name}.")

        if self.readout == Readout.ScoreSign and self.layers[-1].out_dim != 1:
            raise ConfigurationError(f"Score readout of {self.name} needs a single output.")

        expected = 2 if self.readout == Readout.ScoreSign else self.layers[-1].out_dim

        if len(self.class_names) != expected:
            raise ConfigurationError(f"{self.name} needs {expected} class names, got {len(self.class_names)}.")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def context_dim(self) -> int:
        return 0 if self.context_layer is None else self.layers[self.context_layer].out_dim

    @property
    def relu_units(self) -> int:
        return sum(map(lambda l: l.out_dim, filter(lambda l: l.relu, self.layers)))

    def with_weight(self, layer: int, row: int, col: int, value: float) -> PiecewiseLinearCircuit:
        """A copy with one weight replaced."""

        layers = list(self.layers)

        weight = layers[layer].weight.copy()
        weight[row, col] = value

        layers[layer] = Layer(weight, layers[layer].bias, layers[layer].relu)

        return PiecewiseLinearCircuit(self.name, tuple(layers), self.readout, self.class_names, self.context_layer)


@dataclass(frozen=True)
class CircuitTrace:
    pre_activations: List[Vector]

    post_activations: List[Vector]

    outputs: Vector

    def relu_activity(self, circuit: PiecewiseLinearCircuit) -> NDArray[np.bool_]:
        active = [post > activity_threshold for (layer, post) in zip(circuit.layers, self.post_activations)
                  if layer.relu]

        return np.concatenate(active) if active else np.zeros(0, dtype=bool)


@dataclass(frozen=True)
class ReadoutResult:
    label: int

    class_name: str

    score: Optional[float]


def circuit_forward(c: PiecewiseLinearCircuit, h: ArrayLike,
                    context: Optional[ArrayLike] = None) -> Tuple[CircuitTrace, ReadoutResult]:
    value = np.asarray(h, dtype=float).ravel()

    check_dimension("Circuit input", value.size, c.input_dim)

    extra = None

    if context is not None:
        if c.context_layer is None:
            raise ConfigurationError(f"Circuit {c.name} takes no context vector.")

        extra = np.asarray(context, dtype=float).ravel()

        check_dimension("Context vector", extra.size, c.context_dim)

    pre: List[Vector] = []
    post: List[Vector] = []

    for (i, layer) in enumerate(c.layers):
        z = layer.weight @ value + layer.bias
        value = np.maximum(z, 0.0) if layer.relu else z

        if extra is not None and i == c.context_layer:
            value = value + extra

        pre.append(z)
        post.append(value)

    trace = CircuitTrace(pre, post, value)

    if c.readout == Readout.ScoreSign:
        score = float(value[0])
        label = 0 if score > 0 else 1

        return trace, ReadoutResult(label, c.class_names[label], score)

    label = int(np.argmax(value))

    return trace, ReadoutResult(label, c.class_names[label], None)


def coordinate_patch(s: Iterable[int], h_src: ArrayLike, h_trg: ArrayLike) -> NDArray[np.float64]:
    source = np.asarray(h_src, dtype=float)
    target = np.array(h_trg, dtype=float)

    check_dimension("Source", source.size, target.size)

    index = sorted(set(s))

    if index and not (0 <= index[0] and index[-1] < target.size):
        raise DimensionError(f"Patch set {index} is not a subset of [0, {target.size}).")

    target[index] = source[index]

    return target


def circle_patch_divergence(r: float = 1.0) -> float:
    """Distance from the centre of a disc of radius r to the patch of (0, r) by (r, 0) on the first axis."""

    patched = coordinate_patch({0}, (r, 0.0), (0.0, r))

    return float(np.linalg.norm(patched))


@dataclass(frozen=True)
class ClosureReport:
    closed: bool

    witness: Optional[Point] = None

    # Donors h^(k) and the running patches of the constructive argument, one per coordinate.
    donors: List[Point] = field(default_factory=list)

    construction: List[Point] = field(default_factory=list)

    # First step whose patch leaves the set (a patch of two members that is not a member).
    first_violation: Optional[int] = None


def patch_closure_check(points: ArrayLike) -> ClosureReport:
    """Decides whether a finite set equals the Cartesian product of its coordinate projections."""

    array = np.array(points, dtype=float, ndmin=2)

    if array.size == 0:
        raise EmptyInputError("Patch closure is undefined for an empty set.")

    members = set(map(tuple, array.tolist()))
    projections = [sorted(set(array[:, i].tolist())) for i in range(array.shape[1])]

    if len(members) == math.prod(map(len, projections)):
        return ClosureReport(True)

    # First coordinate varies fastest.
    witness = next(t for t in map(lambda p: tuple(reversed(p)), product(*reversed(projections)))
                   if t not in members)

    ordered = sorted(members)

    donors = [next(m for m in ordered if m[k] == witness[k]) for k in range(len(witness))]

    construction: List[Point] = [donors[0]]

    for k in range(1, len(donors)):
        construction.append(tuple(coordinate_patch({k}, donors[k], construction[-1]).tolist()))

    first = next(k for (k, step) in enumerate(construction) if step not in members)

    return ClosureReport(False, witness, donors, construction, first)


def mean_diff_vector(class_a: ArrayLike, class_b: ArrayLike) -> NDArray[np.float64]:
    a = as_matrix("Class A", class_a)
    b = as_matrix("Class B", class_b)

    check_dimension("Class B", b.shape[1], a.shape[1])

    return a.mean(axis=0) - b.mean(axis=0)


def mean_difference_patch(class_a: ArrayLike, class_b: ArrayLike, targets: ArrayLike) -> NDArray[np.float64]:
    """Steers class-B representations towards class A by adding the difference of class means."""

    delta = mean_diff_vector(class_a, class_b)
    base = np.asarray(targets, dtype=float)

    check_dimension("Targets", base.shape[-1], delta.size)

    return base + delta


def relu_activity(model: Union[PiecewiseLinearCircuit, Mlp], points: ArrayLike,
                  context: Optional[ArrayLike] = None) -> NDArray[np.bool_]:
    """Per-sample activity of every ReLU unit, one row per point."""

    batch = np.array(points, dtype=float, ndmin=2)

    if isinstance(model, Mlp):
        if model.mode != Mode.Eval:
            raise ModeError("Audits run against a model in Eval mode.")

        return forward(model, batch).hidden_post > activity_threshold

    if batch.shape[0] == 0:
        return np.zeros((0, model.relu_units), dtype=bool)

    return np.vstack(list(map(lambda p: circuit_forward(model, p, context)[0].relu_activity(model), batch)))


@dataclass(frozen=True)
class AuditReport:
    # flags[i, u]: unit u is active for intervened sample i but silent on every natural of its intended class.
    flags: NDArray[np.bool_]

    @property
    def flagged_units(self) -> List[int]:
        return list(map(int, np.nonzero(self.flags.any(axis=0))[0])) if self.flags.size else []

    @property
    def flagged_samples(self) -> List[int]:
        return list(map(int, np.nonzero(self.flags.any(axis=1))[0])) if self.flags.size else []

    def units_of(self, sample: int) -> List[int]:
        return list(map(int, np.nonzero(self.flags[sample])[0]))


def relu_pattern_audit(model: Union[PiecewiseLinearCircuit, Mlp], natural_by_class: Mapping[int, ArrayLike],
                       intervened: Sequence[Tuple[ArrayLike, int]],
                       context: Optional[ArrayLike] = None) -> AuditReport:
    units = model.relu_units if isinstance(model, PiecewiseLinearCircuit) else model.config.hidden_width

    if not intervened:
        return AuditReport(np.zeros((0, units), dtype=bool))

    natural_activity: Dict[int, NDArray[np.bool_]] = {}

    for (_, label) in intervened:
        if label in natural_activity:
            continue

        if label not in natural_by_class or np.size(natural_by_class[label]) == 0:
            raise MissingClassError(label)

        natural_activity[label] = relu_activity(model, natural_by_class[label], context).any(axis=0)

    activity = relu_activity(model, [v for (v, _) in intervened], context)
    silent = np.vstack([~natural_activity[label] for (_, label) in intervened])

    return AuditReport(activity & silent)


@dataclass(frozen=True)
class ConvexHull:
    pass


@dataclass(frozen=True)
class LocalPca:
    k: int = 10

    var_threshold: float = 0.95


ProjectionMode = Union[ConvexHull, LocalPca]


def _simplex_projection(w: Vector) -> Vector:
    # Sort-based Euclidean projection onto the probability simplex.
    u = np.sort(w)[::-1]
    cumulative = np.cumsum(u) - 1.0
    index = np.arange(1, w.size + 1)

    rho = np.nonzero(u - cumulative / index > 0)[0][-1]
    theta = cumulative[rho] / (rho + 1.0)

    return np.maximum(w - theta, 0.0)


def hull_weights(class_points: ArrayLike, v: ArrayLike) -> NDArray[np.float64]:
    """Simplex weights of the point of the convex hull nearest to v, by accelerated projected gradient."""

    points = as_matrix("Class points", class_points)
    target = np.asarray(v, dtype=float).ravel()

    check_dimension("Query", target.size, points.shape[1])

    n = points.shape[0]

    exact = np.nonzero(np.all(points == target, axis=1))[0]

    if exact.size:
        weights = np.zeros(n)
        weights[exact[0]] = 1.0

        return weights

    gram = points @ points.T
    lipschitz = float(np.linalg.eigvalsh(gram)[-1])

    w = np.full(n, 1.0 / n)

    if lipschitz <= 0:
        return w

    y = w.copy()
    t = 1.0

    for _ in range(hull_max_iterations):
        gradient = points @ (points.T @ y - target)
        w_next = _simplex_projection(y - gradient / lipschitz)

        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = w_next + ((t - 1.0) / t_next) * (w_next - w)

        step = float(np.linalg.norm(w_next - w))

        (w, t) = (w_next, t_next)

        if step < hull_tolerance:
            break

    return w


def project_to_class_region(class_points: ArrayLike, v: ArrayLike,
                            mode: ProjectionMode = ConvexHull()) -> NDArray[np.float64]:
    points = as_matrix("Class points", class_points)

    if isinstance(mode, ConvexHull):
        return hull_weights(points, v) @ points

    target = np.asarray(v, dtype=float).ravel()

    check_dimension("Query", target.size, points.shape[1])

    k = min(mode.k, points.shape[0])
    nearest = np.argsort(np.linalg.norm(points - target, axis=1), kind="stable")[:k]

    basis = pca(points[nearest], points.shape[1])

    return basis.truncate(rank_for_variance(basis, mode.var_threshold)).reconstruct(target)


@dataclass(frozen=True)
class DormantScan:
    null: List[int]

    changed: List[int]

    before: List[ReadoutResult]

    after: List[ReadoutResult]

    def is_dormant_on(self, declared: Iterable[int]) -> bool:
        """Null on every declared context and changed on at least one other."""

        subset = set(declared)

        return subset <= set(self.null) and any(map(lambda c: c not in subset, self.changed))

    @property
    def dormant(self) -> bool:
        return bool(self.null) and bool(self.changed)


def dormant_change_scan(c: PiecewiseLinearCircuit, base_input: ArrayLike, divergence: ArrayLike,
                        contexts: Sequence[ArrayLike], epsilon: float = 1e-9) -> DormantScan:
    base = np.asarray(base_input, dtype=float)
    shifted = base + np.asarray(divergence, dtype=float)

    (null, changed) = ([], [])
    (before, after) = ([], [])

    for (i, context) in enumerate(contexts):
        (_, original) = circuit_forward(c, base, context)
        (_, patched) = circuit_forward(c, shifted, context)

        moved = original.label != patched.label

        if original.score is not None and patched.score is not None:
            moved = moved or abs(patched.score - original.score) > epsilon

        (changed if moved else null).append(i)

        before.append(original)
        after.append(patched)

    return DormantScan(null, changed, before, after)


_header_pattern: Final[Pattern[str]] = re.compile(r"^(\w+)\s+(.+?)\s*$")
_layer_pattern: Final[Pattern[str]] = re.compile(r"^layer\s+(\d+)\s+(\d+)\s+(relu|linear)\s*$")
_bias_pattern: Final[Pattern[str]] = re.compile(r"^bias\s+(.*)$")


def _numbers(line: str) -> List[float]:
    return list(map(float, line.split()))


def dump_circuit(c: PiecewiseLinearCircuit) -> str:
    out = StringIO()

    out.write("# divlab circuit definition\n")
    out.write(f"version {circuit_format_version}\n")
    out.write(f"name {c.name}\n")
    out.write(f"readout {c.readout.value}\n")
    out.write(f"classes {' '.join(c.class_names)}\n")
    out.write(f"context {'none' if c.context_layer is None else c.context_layer}\n")

    for layer in c.layers:
        out.write(f"layer {layer.out_dim} {layer.in_dim} {'relu' if layer.relu else 'linear'}\n")

        for row in layer.weight:
            out.write(" ".join(map(repr, map(float, row))) + "\n")

        out.write("bias " + " ".join(map(repr, map(float, layer.bias))) + "\n")

    return out.getvalue()


def load_circuit(text: str) -> PiecewiseLinearCircuit:
    lines = list(filter(lambda l: l and not l.startswith("#"), map(str.strip, text.splitlines())))

    header: Dict[str, str] = {}
    layers: List[Layer] = []

    position = 0

    while position < len(lines) and not lines[position].startswith("layer"):
        match = _header_pattern.match(lines[position])

        if not match:
            raise ConfigurationError(f"Malformed circuit header line: {lines[position]!r}")

        header[match.group(1)] = match.group(2)
        position += 1

    missing = {"version", "name", "readout", "classes", "context"} - header.keys()

    if missing:
        raise ConfigurationError(f"Circuit definition lacks {sorted(missing)}.")

    if int(header["version"]) != circuit_format_version:
        raise ConfigurationError(f"Unsupported circuit format version {header['version']}.")

    while position < len(lines):
        match = _layer_pattern.match(lines[position])

        if not match:
            raise ConfigurationError(f"Expected a layer declaration, got {lines[position]!r}")

        (rows, cols) = (int(match.group(1)), int(match.group(2)))

        body = lines[position + 1:position + 1 + rows]
        bias = _bias_pattern.match(lines[position + 1 + rows]) if position + 1 + rows < len(lines) else None

        if len(body) != rows or bias is None:
            raise ConfigurationError(f"Layer {len(layers)} is truncated.")

        weight = np.array(list(map(_numbers, body)), dtype=float).reshape(rows, cols)

        layers.append(Layer(weight, np.array(_numbers(bias.group(1)), dtype=float), match.group(3) == "relu"))

        position += rows + 2

    context = None if header["context"] == "none" else int(header["context"])

    try:
        readout = Readout(header["readout"])
    except ValueError:
        raise ConfigurationError(f"Unknown readout: {header['readout']}") from None

    return PiecewiseLinearCircuit(header["name"], tuple(layers), readout, tuple(header["classes"].split()), context)


def builtin_circuits() -> Dict[str, PiecewiseLinearCircuit]:
    return dict(map(lambda n: (n, load_circuit(circuits.source(n))), sorted(circuits.names)))
