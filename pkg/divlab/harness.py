from __future__ import annotations

import logging
import math
import time
from concurrent.futures import Future, ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from typing import Any, Callable, Dict, Final, List, Mapping, Optional, Sequence, Tuple, cast

import numpy as np
from numpy.typing import ArrayLike

from divlab.config import ExperimentConfig, apply_overrides
from divlab.divergence import ComparisonSet, DivergenceReport, ReportParams, full_report
from divlab.errors import DegenerateDesignError, LabError
from divlab.harmless import circuit_behavior, classify_divergence
from divlab.neural import Mlp, eval_from_input
from divlab.numerics import OlsFit, Rng, format_ols_table, ols_fit
from divlab.pathology import PiecewiseLinearCircuit, builtin_circuits, circle_patch_divergence, circuit_forward, \
    dormant_change_scan, mean_diff_vector, mean_difference_patch, patch_closure_check, project_to_class_region, \
    relu_pattern_audit
from divlab.records import RunRecord, report_keys, sort_records, write_records
from divlab.synthdata import Dataset
from divlab.tasks import SeedTask, Task
from divlab.writer import RecordWriter, format_value

logger = logging.getLogger(__name__)

minimum_regression_records: Final = 10

summary_metrics: Final = ("mlp_accuracy", "trained_iia", "heldout_iia", "training_emd") + report_keys

example_tolerance: Final = 1e-9


def _run_seed(config: ExperimentConfig, seed: int, reuse: bool) -> List[RunRecord]:
    root = Task.create(config, [seed])

    return cast(SeedTask, root[f"seed{seed}"]).run(reuse)


def summarize(config: ExperimentConfig, records: Sequence[RunRecord]) -> Dict[str, Any]:
    def means(rows: Sequence[RunRecord]) -> Dict[str, float]:
        return {m: float(np.mean([r.to_row()[m] for r in rows])) for m in summary_metrics}

    partitions = sorted(set(map(lambda r: r.partition.value, records)))

    return {
        "config": config.to_dict(),
        "records": len(records),
        "mean": means(records) if records else {},
        "by_partition": {p: means([r for r in records if r.partition.value == p]) for p in partitions}
    }


def run_pipeline(config: ExperimentConfig, jobs: int = 1, reuse: bool = False) -> List[RunRecord]:
    """Runs every seed, then writes metrics.csv and summary.json under the output directory."""

    root = Task.create(config)
    seeds = [t for t in root if isinstance(t, SeedTask)]

    total = len(seeds)

    started = time.perf_counter()

    records: List[RunRecord] = []
    failure: Optional[BaseException] = None

    def collect(done: int, task: SeedTask, result: Callable[[], List[RunRecord]]) -> None:
        nonlocal failure

        logger.info("Processing %s (%d of %d)", task.full_name, done, total)

        try:
            records.extend(result())
        except Exception as e:
            logger.error("Failed to process task: %s", task, exc_info=e)
            failure = failure or e

    if jobs > 1 and total > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures: List[Tuple[SeedTask, Future[List[RunRecord]]]] = \
                [(task, pool.submit(_run_seed, config, task.seed, reuse)) for task in seeds]

            for (done, (task, future)) in enumerate(futures, 1):
                collect(done, task, future.result)
    else:
        for (done, task) in enumerate(seeds, 1):
            collect(done, task, lambda: task.run(reuse))

    if failure is not None:
        raise failure

    records = sort_records(records)

    writer = RecordWriter(config.output_dir)

    write_records(records, writer)
    writer.write_json("summary.json", summarize(config, records))

    elapsed = time.perf_counter() - started

    logger.info("Finished processing %d entries in %d seconds.", total, elapsed)

    return records


def regression_study(records: Sequence[RunRecord], group_by_scheme: bool = False) -> Dict[str, OlsFit]:
    """OLS of held-out IIA on training EMD, pooled under "all" or keyed by scheme."""

    if len(records) < minimum_regression_records:
        raise DegenerateDesignError(
            f"The regression needs at least {minimum_regression_records} records, got {len(records)}.")

    modes = set(map(lambda r: (r.loss_mode, r.cl_eps), records))

    if len(modes) < 2:
        logger.warning("All %d records share one loss setting; the regression spans a single mode.", len(records))

    if group_by_scheme:
        groups: Dict[str, List[RunRecord]] = {}

        for record in records:
            groups.setdefault(record.scheme.value, []).append(record)
    else:
        groups = {"all": list(records)}

    def fit(rows: Sequence[RunRecord]) -> OlsFit:
        return ols_fit([r.training_emd for r in rows], [r.heldout_iia for r in rows])

    return {name: fit(rows) for (name, rows) in sorted(groups.items())}


def regression_table(fits: Mapping[str, OlsFit]) -> str:
    sections = map(lambda kv: f"== {kv[0]} ==\n" + format_ols_table(kv[1], "Held-out IIA", "Training EMD"),
                   fits.items())

    return "\n".join(sections)


def sweep(config: ExperimentConfig, axes: Sequence[Tuple[Optional[str], str, Sequence[Any]]],
          jobs: int = 1) -> Dict[str, List[RunRecord]]:
    """Runs the pipeline over the Cartesian product of the axes, one output directory per point."""

    results: Dict[str, List[RunRecord]] = {}

    combinations = list(product(*map(lambda a: a[2], axes)))

    for (i, values) in enumerate(combinations, 1):
        overrides = [(section, key, value) for ((section, key, _), value) in zip(axes, values)]

        label = ",".join(map(lambda o: f"{o[0] + '.' if o[0] else ''}{o[1]}={format_value(o[2])}", overrides))
        label = label.replace("/", "_").replace(" ", "")

        point = replace(apply_overrides(config, overrides), output_dir=config.output_dir / label)

        logger.info("Sweep point %s (%d of %d)", label, i, len(combinations))

        results[label] = run_pipeline(point, jobs)

    writer = RecordWriter(config.output_dir)

    rows = [dict(r.to_row(), point=label) for (label, records) in results.items() for r in records]
    writer.write_table("sweep.csv", "sweep", rows)

    return results


@dataclass(frozen=True)
class MeanDifferenceStudy:
    """Patching class B toward class A by the difference of class means, on a trained classifier."""

    class_a: int

    class_b: int

    success_rate: float

    report: DivergenceReport

    flagged_units: List[int]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "class_a": self.class_a,
            "class_b": self.class_b,
            "success_rate": self.success_rate,
            "flagged_units": self.flagged_units,
            "report": self.report.to_dict()
        }


def mean_difference_study(dataset: Dataset, model: Mlp, class_a: int, class_b: int,
                          params: ReportParams = ReportParams()) -> MeanDifferenceStudy:
    a = dataset.h[dataset.labels == class_a]
    b = dataset.h[dataset.labels == class_b]

    patched = mean_difference_patch(a, b, b)

    rng = Rng(params.seed, 5)
    truth = a[rng.integers(a.shape[0], (patched.shape[0],))]

    report = full_report(ComparisonSet(a, patched, truth), params)

    (predicted, _) = eval_from_input(model, patched)

    audit = relu_pattern_audit(model, {class_a: a}, [(v, class_a) for v in patched])

    return MeanDifferenceStudy(class_a, class_b, float(np.mean(predicted == class_a)), report, audit.flagged_units)


@dataclass(frozen=True)
class ExampleCheck:
    name: str

    expected: Tuple[float, ...]

    actual: Tuple[float, ...]

    @property
    def passed(self) -> bool:
        if len(self.expected) != len(self.actual):
            return False

        return all(map(lambda p: math.isclose(p[0], p[1], rel_tol=0.0, abs_tol=example_tolerance),
                       zip(self.expected, self.actual)))

    def to_row(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "expected": " ".join(map(format_value, self.expected)),
            "actual": " ".join(map(format_value, self.actual))
        }


@dataclass(frozen=True)
class ExampleReport:
    checks: List[ExampleCheck]

    @property
    def passed(self) -> bool:
        return all(map(lambda c: c.passed, self.checks))

    @property
    def failures(self) -> List[ExampleCheck]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> ExampleCheck:
        return next(c for c in self.checks if c.name == name)


# Class regions of the hidden-pathway circuit.
example_class_a: Final = ((1.0, 0.0, 1.0, 0.0), (0.0, 1.0, 1.0, 0.0))
example_class_b: Final = ((0.0, 0.0, 1.0, 0.0), (0.0, 0.0, 1.0, 1.0))


def _check(name: str, expected: ArrayLike, compute: Callable[[], ArrayLike]) -> ExampleCheck:
    try:
        actual = tuple(map(float, np.ravel(np.asarray(compute(), dtype=float))))
    except (LabError, KeyError, IndexError, StopIteration) as e:
        logger.error("Worked example %s failed to evaluate: %s", name, e)
        actual = ()

    return ExampleCheck(name, tuple(map(float, np.ravel(np.asarray(expected, dtype=float)))), actual)


def worked_examples_suite(circuits: Optional[Mapping[str, PiecewiseLinearCircuit]] = None) -> ExampleReport:
    """Evaluates every hand-derived pathology and harmlessness example exactly."""

    c = dict(builtin_circuits()) if circuits is None else dict(circuits)

    mean_difference = c["mean_difference"]
    dormant = c["dormant"]
    balanced = c["balanced"]

    a = np.array(example_class_a)
    b = np.array(example_class_b)

    def hidden(circuit: PiecewiseLinearCircuit, h: ArrayLike, context: Optional[ArrayLike] = None) -> ArrayLike:
        return circuit_forward(circuit, h, context)[0].post_activations[0]

    def score(circuit: PiecewiseLinearCircuit, h: ArrayLike) -> float:
        result = circuit_forward(circuit, h)[1]

        assert result.score is not None
        return result.score

    def label(circuit: PiecewiseLinearCircuit, h: ArrayLike, context: Optional[ArrayLike] = None) -> int:
        return circuit_forward(circuit, h, context)[1].label

    def patched() -> ArrayLike:
        return mean_difference_patch(a, b, b)

    def context(v4: float) -> List[float]:
        return [0.0, 0.0, 0.0, v4]

    def naturals_of_c() -> int:
        grid = (0.0, 0.25, 0.5, 0.75, 1.0)
        naturals = np.vstack((a, b))

        return sum(1 for (h, v4) in product(naturals, grid) if label(dormant, h, context(v4)) == 2)

    def dormant_scan() -> ArrayLike:
        scan = dormant_change_scan(dormant, a[0], patched()[0] - a[0], [context(0.5), context(0.8)])

        return [len(scan.null), len(scan.changed), scan.null[0], scan.changed[0]]

    def harmless_flag(x_hat: ArrayLike, naturals: ArrayLike, eval_set: ArrayLike,
                      psi: Callable[[Any], Any], n: int, r: int) -> ArrayLike:
        verdict = classify_divergence(x_hat, naturals, eval_set, psi, n, r, 1e-6)

        return [1.0 if verdict.harmless else 0.0]

    plane = np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])

    checks = [
        _check("mean_difference.hidden_a1", [0.25, 0.0, 0.0], lambda: hidden(mean_difference, a[0])),
        _check("mean_difference.hidden_a2", [0.0, 0.5, 0.0], lambda: hidden(mean_difference, a[1])),
        _check("mean_difference.score_a", [0.25, 0.5], lambda: [score(mean_difference, h) for h in a]),
        _check("mean_difference.score_b", [0.0, 0.0], lambda: [score(mean_difference, h) for h in b]),
        _check("mean_difference.delta", [0.5, 0.5, 0.0, -0.5], lambda: mean_diff_vector(a, b)),
        _check("mean_difference.patched_hidden_1", [0.0, 0.0, 0.5], lambda: hidden(mean_difference, patched()[0])),
        _check("mean_difference.patched_score_1", [0.5], lambda: [score(mean_difference, patched()[0])]),
        _check("mean_difference.patched_hidden_2", [0.25, 0.0, 0.0], lambda: hidden(mean_difference, patched()[1])),
        _check("mean_difference.patched_score_2", [0.25], lambda: [score(mean_difference, patched()[1])]),
        _check("mean_difference.audit_third_unit", [2.0],
               lambda: relu_pattern_audit(mean_difference, {0: a}, [(patched()[0], 0)]).units_of(0)),
        _check("hull_projection.point", [0.5, 0.5, 1.0, 0.0], lambda: project_to_class_region(a, patched()[0])),
        _check("hull_projection.score", [0.0],
               lambda: [score(mean_difference, project_to_class_region(a, patched()[0]))]),
        _check("dormant.patched_context_0.5", [0.0], lambda: [label(dormant, patched()[0], context(0.5))]),
        _check("dormant.patched_context_0.8", [2.0], lambda: [label(dormant, patched()[0], context(0.8))]),
        _check("dormant.natural_class_c", [0.0], lambda: [naturals_of_c()]),
        _check("dormant.scan", [1.0, 1.0, 0.0, 1.0], dormant_scan),
        _check("balanced.flipped", [-1.0], lambda: [score(balanced, [1.0, 3.0, 1.0, 1.0])]),
        _check("balanced.natural", [1.0], lambda: [score(balanced, [1.0, 1.0, 1.0, 1.0])]),
        _check("circle.radius_1", [math.sqrt(2.0)], lambda: [circle_patch_divergence(1.0)]),
        _check("circle.radius_2", [2.0 * math.sqrt(2.0)], lambda: [circle_patch_divergence(2.0)]),
        _check("closure.witness", [1.0, 0.0], lambda: patch_closure_check([[0.0, 0.0], [1.0, 1.0]]).witness or ()),
        _check("harmless.zero_divergence", [1.0],
               lambda: harmless_flag([0.5, 0.5, 1.0, 0.0], a, np.vstack((a, b)), circuit_behavior(mean_difference), 2, 1)),
        _check("harmless.null_direction", [1.0],
               lambda: harmless_flag([0.2, 0.3, 0.0, 1.0], plane, plane, lambda x: np.asarray(x)[:3], 3, 2)),
        _check("harmless.mean_difference", [0.0],
               lambda: harmless_flag(patched()[0], a, np.vstack((a, b)), circuit_behavior(mean_difference), 2, 1))
    ]

    report = ExampleReport(checks)

    for check in report.failures:
        logger.warning("Worked example %s failed: expected %s, got %s", check.name, check.expected, check.actual)

    return report
