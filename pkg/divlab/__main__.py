import logging
import sys
import time
from argparse import ArgumentParser
from dataclasses import asdict
from pathlib import Path
from typing import Any, List, Optional, Tuple

from divlab.config import ExperimentConfig, apply_overrides, load_config
from divlab.errors import LabError
from divlab.harness import mean_difference_study, regression_study, regression_table, run_pipeline, sweep, \
    worked_examples_suite
from divlab.parser import parse_assignment, parse_grid_axis, parse_loss, parse_seeds
from divlab.records import read_records, sort_records, write_records
from divlab.tasks import SeedTask, Task
from divlab.writer import RecordWriter

common = ArgumentParser(add_help=False)

common.add_argument("--config", type=str, help="JSON experiment configuration")
common.add_argument("--seed", type=str, help="Seed, comma separated seeds or an inclusive range such as 0-4")
common.add_argument("--out", type=str, help="Output directory (defaults to $DIVLAB_OUTPUT_ROOT)")
common.add_argument("--scheme", choices=("default", "ood"), help="Partition scheme")
common.add_argument("--loss", type=str, help="Alignment loss: das, cl or das+cl (optionally das+cl:EPS)")
common.add_argument("--cl-eps", type=float, help="Weight of the CL loss")
common.add_argument("--format", choices=("json", "csv"), default="csv", help="Format of the primary output file")
common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="Override one configuration value (repeatable)")
common.add_argument("--jobs", type=int, default=1, help="Seeds to process in parallel")
common.add_argument("--verbose", default=False, action="store_true", help="Print debug messages")
common.add_argument("--quiet", default=False, action="store_true", help="Print only error messages")

parser = ArgumentParser(
    prog="divlab",
    description="Measure representational divergence of causal interventions on synthetic data.")

commands = parser.add_subparsers(dest="command", required=True)

commands.add_parser("gen-data", parents=[common], help="Generate the synthetic dataset of each seed")
commands.add_parser("train-mlp", parents=[common], help="Train the classifiers of each seed")
commands.add_parser("train-align", parents=[common], help="Train an alignment per partition")
commands.add_parser("evaluate", parents=[common], help="Evaluate trained alignments")

divergence_parser = commands.add_parser(
    "divergence", parents=[common],
    help="Divergence report of a mean-difference patch, or of the saved alignments with --alignment",
    description="Without --alignment, patch class B toward class A by the difference of class means and report "
                "the divergence of the patched vectors. With --alignment, report the divergence of the saved "
                "alignment checkpoint of every partition instead.")
divergence_parser.add_argument("--class-a", type=int, default=0, help="Class patched toward")
divergence_parser.add_argument("--class-b", type=int, default=1, help="Class whose samples are patched")
divergence_parser.add_argument("--alignment", default=False, action="store_true",
                               help="Report the saved alignment checkpoints instead of the mean-difference patch")

commands.add_parser("examples", parents=[common], help="Check the hand-derived worked examples")

regress_parser = commands.add_parser("regress", parents=[common], help="Regress held-out IIA on training EMD")
regress_parser.add_argument("inputs", nargs="*", help="Directories holding metrics.csv (defaults to --out)")
regress_parser.add_argument("--by-scheme", default=False, action="store_true", help="Fit each scheme separately")

sweep_parser = commands.add_parser("sweep", parents=[common], help="Run the pipeline over a grid of settings")
sweep_parser.add_argument("--grid", action="append", default=[], metavar="SECTION.KEY=V1,V2",
                          help="One sweep axis (repeatable)")

commands.add_parser("run", parents=[common], help="Run the whole pipeline")

args = parser.parse_args()

if args.quiet:
    log_level = logging.WARNING
elif args.verbose:
    log_level = logging.DEBUG
else:
    log_level = logging.INFO

logging.basicConfig(level=log_level, format="[%(levelname)s] %(name)s - %(message)s")
logger = logging.getLogger("divlab")


def build_config() -> ExperimentConfig:
    config = load_config(Path(args.config).expanduser()) if args.config else ExperimentConfig()

    overrides: List[Tuple[Optional[str], str, Any]] = list(map(parse_assignment, args.set))

    if args.seed is not None:
        overrides.append((None, "seeds", parse_seeds(args.seed)))

    if args.out is not None:
        overrides.append((None, "output_dir", args.out))

    if args.scheme is not None:
        overrides.append((None, "scheme", args.scheme))

    if args.loss is not None:
        (mode, eps) = parse_loss(args.loss)

        overrides.append((None, "loss_mode", mode))

        if eps is not None:
            overrides.append((None, "cl_eps", eps))

    if args.cl_eps is not None:
        overrides.append((None, "cl_eps", args.cl_eps))

    return apply_overrides(config, overrides)


def seed_tasks(config: ExperimentConfig) -> List[SeedTask]:
    return [t for t in Task.create(config) if isinstance(t, SeedTask)]


started = time.perf_counter()

try:
    config = build_config()

    if args.jobs < 1:
        sys.exit(f"The number of jobs must be positive: {args.jobs}")

    dest = config.output_dir

    if dest.exists() and dest.is_file():
        sys.exit(f"The specified output already exists but it's not a valid directory: {dest}")

    writer = RecordWriter(dest)

    logger.info("Running %s with output in %s", args.command, dest)

    if args.command == "gen-data":
        for task in seed_tasks(config):
            logger.info("Wrote %s", task.write_dataset())

    elif args.command == "train-mlp":
        for task in seed_tasks(config):
            task.models()

    elif args.command == "train-align":
        for task in seed_tasks(config):
            models = task.models(reuse=True)

            for partition in task.partitions:
                partition.train(models[partition.partition])

    elif args.command == "evaluate":
        records = []

        for task in seed_tasks(config):
            models = task.models(require=True)

            for partition in task.partitions:
                model = models[partition.partition]
                records.append(partition.evaluate(model, *partition.train(model, require=True)))

        if args.format == "csv":
            write_records(records, writer)
        else:
            writer.write_json("metrics.json", list(map(lambda r: r.to_row(), sort_records(records))))

    elif args.command == "divergence" and args.alignment:
        for task in seed_tasks(config):
            models = task.models(require=True)

            for partition in task.partitions:
                (af, _, _) = partition.train(models[partition.partition], require=True)
                report = partition.divergence(af)

                name = f"seed_{task.seed}/divergence_{partition.name}"

                if args.format == "csv":
                    writer.write_rows(name + ".csv", ["metric", "value"], list(report.to_dict().items()))
                else:
                    writer.write_json(name + ".json", report.to_dict())

                logger.info("%s: EMD %.6f, row EMD %.6f.", partition, report.emd, report.row_emd)

    elif args.command == "divergence":
        for task in seed_tasks(config):
            models = task.models(require=True)

            for partition in task.partitions:
                classes = partition.split.classes

                if args.class_a not in classes or args.class_b not in classes:
                    logger.info("Skipping %s: classes %d and %d are not both present.",
                                partition, args.class_a, args.class_b)
                    continue

                study = mean_difference_study(task.dataset.subset(partition.split.validation),
                                              models[partition.partition], args.class_a, args.class_b,
                                              config.report)

                name = f"seed_{task.seed}/mean_difference_{partition.name}_{args.class_a}_{args.class_b}"

                if args.format == "csv":
                    writer.write_rows(name + ".csv", ["metric", "value"],
                                      [("success_rate", study.success_rate),
                                       ("flagged_units", len(study.flagged_units))] +
                                      list(study.report.to_dict().items()))
                else:
                    writer.write_json(name + ".json", study.to_dict())

                logger.info("%s: %.4f of patched class %d samples classified as %d.",
                            partition, study.success_rate, args.class_b, args.class_a)

    elif args.command == "examples":
        report = worked_examples_suite()

        if args.format == "csv":
            writer.write_table("examples.csv", "examples", map(lambda c: c.to_row(), report.checks))
        else:
            writer.write_json("examples.json", list(map(lambda c: c.to_row(), report.checks)))

        logger.info("%d of %d worked examples passed.", len(report.checks) - len(report.failures),
                    len(report.checks))

        if not report.passed:
            sys.exit(f"Worked examples failed: {', '.join(map(lambda c: c.name, report.failures))}")

    elif args.command == "regress":
        inputs = list(map(lambda d: Path(d).expanduser(), args.inputs)) or [dest]

        records = [r for d in inputs for r in read_records(d / "metrics.csv")]

        fits = regression_study(records, args.by_scheme)

        writer.write_text("regression.txt", regression_table(fits))

        if args.format == "csv":
            fields = list(asdict(next(iter(fits.values()))).keys())

            writer.write_rows("regression.csv", ["group"] + fields,
                              [[name] + list(asdict(fit).values()) for (name, fit) in fits.items()])
        else:
            writer.write_json("regression.json", {name: asdict(fit) for (name, fit) in fits.items()})

        print(regression_table(fits))

    elif args.command == "sweep":
        if not args.grid:
            sys.exit("A sweep needs at least one --grid axis.")

        sweep(config, list(map(parse_grid_axis, args.grid)), args.jobs)

    elif args.command == "run":
        run_pipeline(config, args.jobs)
except LabError as e:
    logger.debug("Command failed.", exc_info=e)
    sys.exit(str(e))

elapsed = time.perf_counter() - started

logger.info("Finished %s in %d seconds.", args.command, elapsed)
