from __future__ import annotations

import json
import logging
from dataclasses import asdict, replace
from functools import reduce
from pathlib import Path
from typing import AbstractSet, Dict, Final, Iterable, List, MutableMapping, Optional, Sequence, Tuple, ValuesView, \
    cast

import numpy as np
from numpy.typing import NDArray

from divlab import schemas
from divlab.alignment import AlignmentFunction, InterventionBatch, default_selectors, evaluate_iia, intervened, \
    load_alignment, make_intervention_samples, save_alignment, train_alignment, within_classes
from divlab.config import ExperimentConfig
from divlab.divergence import ComparisonSet, DivergenceReport, full_report, pca_scatter, row_emd
from divlab.errors import ConfigurationError, MissingClError
from divlab.neural import Mlp, evaluate_loss, load_model, save_model, train_mlp
from divlab.numerics import Rng
from divlab.records import RunRecord
from divlab.synthdata import Dataset, PartitionName, PartitionSplit, Scheme, generate_dataset, split_partitions, \
    write_csv
from divlab.writer import RecordWriter

logger = logging.getLogger(__name__)

partition_names: Final = {
    Scheme.Default: (PartitionName.DefaultP1, PartitionName.DefaultP2),
    Scheme.OOD: (PartitionName.Dense, PartitionName.Sparse)
}

# The default scheme trains a single classifier on both partitions.
combined_model: Final = "combined"

Matrix = NDArray[np.float64]


def _subsample(rows: Matrix, count: int, rng: Rng) -> Matrix:
    if rows.shape[0] <= count:
        return rows

    return rows[np.sort(rng.permutation(rows.shape[0])[:count])]


class Task:

    @classmethod
    def create(cls, config: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> Task:
        root = Task()

        for seed in (config.seeds if seeds is None else seeds):
            task = SeedTask(f"seed{seed}", root, config, seed)

            for name in partition_names[config.scheme]:
                PartitionTask(name.value, task, name)

        return root

    def __init__(self, name: str = "", parent: Optional[Task] = None) -> None:
        self._name = name
        self._parent = parent
        self._children: MutableMapping[str, Task] = dict()

        if parent:
            parent._children[self.name] = self

            segments = list(filter(any, map(lambda a: a.name, self.ancestors)))
            segments.append(self.name)

            self._full_name = ".".join(segments)
        else:
            self._full_name = name

    @property
    def name(self) -> str:
        return self._name

    @property
    def full_name(self) -> str:
        return self._full_name

    @property
    def parent(self) -> Optional[Task]:
        return self._parent

    @property
    def ancestors(self) -> Iterable[Task]:
        if self.parent:
            yield from self.parent.ancestors
            yield self.parent

    def keys(self) -> AbstractSet[str]:
        return self._children.keys()

    def values(self) -> ValuesView[Task]:
        return self._children.values()

    def __getitem__(self, key: str) -> Task:
        return self._children[key]

    def __iter__(self) -> Iterable[Task]:
        for child in self.values():
            yield from child.__iter__()
            yield child

    def __len__(self) -> int:
        return len(self._children)

    def __repr__(self) -> str:
        return self.full_name

    def __bool__(self) -> bool:
        return True


class SeedTask(Task):
    """Dataset, partitions and classifiers of one seed; its children align one partition each."""

    def __init__(self, name: str, parent: Optional[Task], config: ExperimentConfig, seed: int) -> None:
        super().__init__(name, parent)

        self.config = config
        self.seed = seed

        self._dataset: Optional[Dataset] = None
        self._splits: Optional[Dict[PartitionName, PartitionSplit]] = None

    @property
    def directory(self) -> Path:
        return self.config.output_dir / f"seed_{self.seed}"

    @property
    def writer(self) -> RecordWriter:
        return RecordWriter(self.directory)

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = generate_dataset(self.config.dataset_config(self.seed))

        return self._dataset

    @property
    def splits(self) -> Dict[PartitionName, PartitionSplit]:
        if self._splits is None:
            splits = split_partitions(self.dataset, self.config.scheme, seed=self.seed)
            self._splits = dict(map(lambda s: (s.name, s), splits))

        return self._splits

    @property
    def partitions(self) -> List[PartitionTask]:
        return list(map(lambda t: cast(PartitionTask, t), self.values()))

    def model_name(self, partition: PartitionName) -> str:
        return combined_model if self.config.scheme == Scheme.Default else partition.value

    def write_dataset(self) -> Path:
        path = self.writer.path_of("dataset.csv")

        write_csv(self.dataset, path)

        return path

    def _train_model(self, name: str, splits: Sequence[PartitionSplit]) -> Mlp:
        train = reduce(np.union1d, map(lambda s: s.train, splits))
        validation = reduce(np.union1d, map(lambda s: s.validation, splits))

        logger.info("Training MLP %s of %s on %d samples.", name, self, train.size)

        (model, history) = train_mlp(self.dataset.subset(train), self.config.mlp_config(self.seed),
                                     self.dataset.subset(validation), logger)

        save_model(model, self.writer.path_of(f"mlp_{name}.npz"))

        self.writer.write_table(f"mlp_history_{name}.csv", "mlp_history", map(asdict, history))

        return model

    def models(self, reuse: bool = False, require: bool = False) -> Dict[PartitionName, Mlp]:
        """Classifiers by partition, trained afresh or, with reuse, read from existing checkpoints."""

        groups: Dict[str, List[PartitionSplit]] = {}

        for (partition, split) in self.splits.items():
            groups.setdefault(self.model_name(partition), []).append(split)

        trained: Dict[str, Mlp] = {}

        for (name, splits) in groups.items():
            path = self.directory / f"mlp_{name}.npz"

            if (reuse or require) and path.exists():
                logger.debug("Reading MLP checkpoint: %s", path)
                trained[name] = load_model(path)
            elif require:
                raise ConfigurationError(f"No MLP checkpoint at {path}; run train-mlp first.")
            else:
                trained[name] = self._train_model(name, splits)

        return {p: trained[self.model_name(p)] for p in self.splits}

    def run(self, reuse: bool = False) -> List[RunRecord]:
        models = self.models(reuse)

        return list(map(lambda t: t.run(models[t.partition], reuse), self.partitions))


class PartitionTask(Task):
    """Alignment of one partition against its classifier, and the metrics of that alignment."""

    def __init__(self, name: str, parent: SeedTask, partition: PartitionName) -> None:
        super().__init__(name, parent)

        self.partition = partition

    @property
    def seed_task(self) -> SeedTask:
        return cast(SeedTask, self.parent)

    @property
    def index(self) -> int:
        return partition_names[self.seed_task.config.scheme].index(self.partition)

    @property
    def split(self) -> PartitionSplit:
        return self.seed_task.splits[self.partition]

    @property
    def other(self) -> PartitionSplit:
        return next(s for (p, s) in self.seed_task.splits.items() if p != self.partition)

    def _paths(self) -> Tuple[Path, Path]:
        directory = self.seed_task.directory

        return directory / f"align_{self.name}.npz", directory / f"align_{self.name}.json"

    def train(self, model: Mlp, reuse: bool = False, require: bool = False) -> Tuple[AlignmentFunction, Optional[int], int]:
        """The alignment with its selected epoch and epoch count."""

        (checkpoint, meta) = self._paths()

        if (reuse or require) and checkpoint.exists() and meta.exists():
            logger.debug("Reading alignment checkpoint: %s", checkpoint)

            info = json.loads(meta.read_text(encoding="utf-8"))

            return load_alignment(checkpoint), info["selected_epoch"], info["epochs"]

        if require:
            raise ConfigurationError(f"No alignment checkpoint at {checkpoint}; run train-align first.")

        seed = self.seed_task
        split = self.split

        result = train_alignment(model, seed.dataset, split.train, seed.config.dataset.grid,
                                 seed.config.align_config(seed.seed), split.validation, logger)

        writer = seed.writer

        save_alignment(result.alignment, writer.path_of(checkpoint.name))

        writer.write_table(f"align_history_{self.name}.csv", "align_history", map(asdict, result.history))
        writer.write_json(meta.name, {"selected_epoch": result.selected_epoch, "epochs": len(result.history)})

        return result.alignment, result.selected_epoch, len(result.history)

    def _samples(self, pool: NDArray[np.int64], classes: AbstractSet[int], rng: Rng) -> InterventionBatch:
        config = self.seed_task.config
        align = config.align

        batch = make_intervention_samples(self.seed_task.dataset, pool, config.dataset.grid, align.variable,
                                          config.eval_samples, rng)

        return within_classes(batch, sorted(classes))

    def _ground_truth(self, batch: InterventionBatch, rng: Rng) -> Matrix:
        """A natural validation vector with the same variable values for every sample."""

        dataset = self.seed_task.dataset
        groups: Dict[Tuple[float, float], List[int]] = {}

        for i in self.split.validation:
            groups.setdefault((float(dataset.x1[i]), float(dataset.x2[i])), []).append(int(i))

        draws = rng.uniform((len(batch),))
        rows = []

        for (key, u) in zip(map(lambda k: (float(k[0]), float(k[1])), batch.keys), draws):
            if key not in groups:
                raise MissingClError(key)

            members = groups[key]
            rows.append(members[int(u * len(members))])

        return dataset.h[np.asarray(rows, dtype=np.int64)]

    def _validation_report(self, af: AlignmentFunction) -> Tuple[DivergenceReport, Matrix, Matrix, InterventionBatch]:
        seed = self.seed_task
        config = seed.config
        align = config.align_config(seed.seed)
        split = self.split

        sel = default_selectors(seed.dataset.dim, align.subspace_size)[align.variable]

        rng = Rng(seed.seed, 4, self.index)

        own = self._samples(split.validation, split.classes, rng.derive(0))

        h_hat = intervened(af, sel, own)
        natural = seed.dataset.h[split.validation]

        report = full_report(ComparisonSet(natural, h_hat, self._ground_truth(own, rng.derive(4))),
                             replace(config.report, seed=seed.seed))

        return report, natural, h_hat, own

    def divergence(self, af: AlignmentFunction) -> DivergenceReport:
        """Divergence report of an alignment on this partition's validation vectors, as ``evaluate`` computes it."""

        (report, _, _, _) = self._validation_report(af)

        return report

    def evaluate(self, model: Mlp, af: AlignmentFunction, selected_epoch: Optional[int], epochs: int) -> RunRecord:
        seed = self.seed_task
        config = seed.config
        align = config.align_config(seed.seed)
        dataset = seed.dataset
        (split, other) = (self.split, self.other)

        sel = default_selectors(dataset.dim, align.subspace_size)[align.variable]

        rng = Rng(seed.seed, 4, self.index)

        own = self._samples(split.validation, split.classes, rng.derive(0))

        # Classes the alignment never saw; the whole other partition when the two share every class.
        held_classes = (other.classes - split.classes) or other.classes
        held = self._samples(other.validation, held_classes, rng.derive(1))

        trained_iia = evaluate_iia(model, af, sel, own)
        heldout_iia = evaluate_iia(model, af, sel, held)

        params = replace(config.report, seed=seed.seed)

        train_samples = self._samples(split.train, split.classes, rng.derive(2))
        natural_train = _subsample(dataset.h[split.train], params.max_samples, rng.derive(3))

        training_emd = row_emd(natural_train, intervened(af, sel, train_samples)[:params.max_samples],
                               params.causal_dims, params.row_scale, params.blur)

        (report, natural, h_hat, own) = self._validation_report(af)

        self._write_outputs(report, natural, h_hat, own, rng.derive(5))

        (_, accuracy) = evaluate_loss(model, dataset.subset(split.validation))

        logger.info("%s: trained IIA %.4f, held-out IIA %.4f, training EMD %.6f.",
                    self, trained_iia, heldout_iia, training_emd)

        return RunRecord(
            seed=seed.seed,
            scheme=config.scheme,
            loss_mode=config.loss_mode,
            cl_eps=align.cl_weight,
            partition=self.partition,
            mlp_accuracy=accuracy,
            trained_iia=trained_iia,
            heldout_iia=heldout_iia,
            training_emd=training_emd,
            report=report,
            selected_epoch=selected_epoch,
            alignment_epochs=epochs,
            mlp_checksum=model.checksum(),
            alignment_checksum=af.checksum())

    def _write_outputs(self, report: DivergenceReport, natural: Matrix, h_hat: Matrix,
                       samples: InterventionBatch, rng: Rng) -> None:
        seed = self.seed_task
        writer = seed.writer
        count = seed.config.report.max_samples

        writer.write_json(f"report_{self.name}.json", report.to_dict())

        natural_index = np.arange(natural.shape[0])

        if natural_index.size > count:
            natural_index = np.sort(rng.permutation(natural_index.size)[:count])

        labels = seed.dataset.labels[self.split.validation][natural_index]

        scatter = pca_scatter(natural[natural_index], h_hat[:count], labels, samples.labels[:count])

        columns = schemas.columns("pca_scatter")

        writer.write_table(f"pca_scatter_{self.name}.csv", "pca_scatter",
                           map(lambda r: dict(zip(columns, r)), scatter.rows()))

    def run(self, model: Mlp, reuse: bool = False) -> RunRecord:
        return self.evaluate(model, *self.train(model, reuse))
