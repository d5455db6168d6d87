from pathlib import Path

import numpy as np
from pytest import approx, fixture, raises

from divlab.config import ExperimentConfig
from divlab.errors import ConfigurationError
from divlab.neural import Mode
from divlab.synthdata import PartitionName, Scheme, read_csv
from divlab.tasks import PartitionTask, SeedTask, Task, combined_model
from tests.configs import tiny_config


@fixture
def config(tmp_path: Path) -> ExperimentConfig:
    return tiny_config(tmp_path / "out")


def test_create(config: ExperimentConfig):
    root = Task.create(config, [0, 3])

    assert type(root) == Task
    assert set(root.keys()) == {"seed0", "seed3"}

    seed = root["seed3"]

    assert type(seed) == SeedTask
    assert isinstance(seed, SeedTask) and seed.seed == 3
    assert set(seed.keys()) == {"DefaultP1", "DefaultP2"}
    assert all(map(lambda t: isinstance(t, PartitionTask), seed.values()))


def test_create_ood(config: ExperimentConfig):
    root = Task.create(ExperimentConfig(scheme=Scheme.OOD, output_dir=config.output_dir))

    assert set(root.keys()) == {f"seed{s}" for s in range(5)}

    seed = root["seed0"]

    assert isinstance(seed, SeedTask)
    assert list(map(lambda t: t.partition, seed.partitions)) == [PartitionName.Dense, PartitionName.Sparse]
    assert seed.model_name(PartitionName.Dense) == "Dense"


def test_full_name():
    root = Task()
    seed = Task("seed0", root)
    partition = Task("Dense", seed)

    assert root.full_name == ""
    assert seed.full_name == "seed0"
    assert partition.full_name == "seed0.Dense"
    assert repr(partition) == "seed0.Dense"


def test_hierarchy():
    root = Task()
    seed = Task("seed1", root)
    dense = Task("Dense", seed)
    sparse = Task("Sparse", seed)

    assert tuple(root.ancestors) == ()
    assert root["seed1"] == seed

    assert tuple(dense.ancestors) == (root, seed)
    assert seed.keys() == {"Dense", "Sparse"}
    assert seed["Sparse"] == sparse
    assert len(seed) == 2
    assert not any(dense.keys())


def test_iter(config: ExperimentConfig):
    names = tuple(map(lambda t: t.full_name, Task.create(config, [0, 1])))

    assert names == ("seed0.DefaultP1", "seed0.DefaultP2", "seed0", "seed1.DefaultP1", "seed1.DefaultP2", "seed1")


def test_seed_task(config: ExperimentConfig):
    seed = Task.create(config)["seed0"]

    assert isinstance(seed, SeedTask)
    assert seed.directory == config.output_dir / "seed_0"
    assert seed.model_name(PartitionName.DefaultP1) == combined_model
    assert len(seed.dataset) == 500
    assert set(seed.splits) == {PartitionName.DefaultP1, PartitionName.DefaultP2}

    path = seed.write_dataset()

    assert path == seed.directory / "dataset.csv"
    assert np.array_equal(read_csv(path).labels, seed.dataset.labels)


def test_partition_task(config: ExperimentConfig):
    seed = Task.create(config)["seed0"]

    assert isinstance(seed, SeedTask)

    (first, second) = seed.partitions

    assert (first.index, second.index) == (0, 1)
    assert first.split.name == PartitionName.DefaultP1
    assert first.other.name == PartitionName.DefaultP2
    assert first.seed_task is seed


def test_require_checkpoints(config: ExperimentConfig):
    seed = Task.create(config)["seed0"]

    assert isinstance(seed, SeedTask)

    with raises(ConfigurationError):
        seed.models(require=True)


def test_run(config: ExperimentConfig):
    seed = Task.create(config)["seed0"]

    assert isinstance(seed, SeedTask)

    records = seed.run()

    assert [r.partition for r in records] == [PartitionName.DefaultP1, PartitionName.DefaultP2]
    assert records[0].mlp_checksum == records[1].mlp_checksum

    for record in records:
        assert 0.0 <= record.trained_iia <= 1.0
        assert 0.0 <= record.heldout_iia <= 1.0
        assert record.alignment_epochs == 2
        assert record.cl_eps == 0.0

    files = {p.name for p in seed.directory.iterdir()}

    assert {"mlp_combined.npz", "mlp_history_combined.csv"} <= files

    for name in ("DefaultP1", "DefaultP2"):
        assert {f"align_{name}.npz", f"align_{name}.json", f"align_history_{name}.csv", f"report_{name}.json",
                f"pca_scatter_{name}.csv"} <= files

    reloaded = Task.create(config)["seed0"]

    assert isinstance(reloaded, SeedTask)

    models = reloaded.models(require=True)

    assert models[PartitionName.DefaultP1].mode == Mode.Eval
    assert models[PartitionName.DefaultP1].checksum() == records[0].mlp_checksum

    partition = reloaded.partitions[0]
    (af, selected, epochs) = partition.train(models[PartitionName.DefaultP1], require=True)

    assert af.checksum() == records[0].alignment_checksum
    assert (selected, epochs) == (records[0].selected_epoch, records[0].alignment_epochs)
    assert partition.divergence(af).to_dict() == approx(records[0].report.to_dict())


def test_run_is_deterministic(tmp_path: Path):
    first = Task.create(tiny_config(tmp_path / "a"))["seed0"]
    second = Task.create(tiny_config(tmp_path / "b"))["seed0"]

    assert isinstance(first, SeedTask) and isinstance(second, SeedTask)

    (a, b) = (first.run(), second.run())

    assert [r.alignment_checksum for r in a] == [r.alignment_checksum for r in b]
    assert [r.trained_iia for r in a] == [r.trained_iia for r in b]
