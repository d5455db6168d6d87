from pathlib import Path

import numpy as np
from pytest import fixture, mark, raises

from divlab.errors import ConfigurationError, DimensionError, PartitionError
from divlab.synthdata import ClassGrid, Dataset, DatasetConfig, PartitionName, Scheme, class_means, \
    dense_classes, generate_dataset, read_csv, sparse_classes, split_partitions, train_validation_split, write_csv
from divlab.numerics import Rng


@fixture
def dataset() -> Dataset:
    return generate_dataset(DatasetConfig(samples_per_class=40, seed=3))


def test_default_dataset_shape(dataset: Dataset):
    assert dataset.dim == 18
    assert len(dataset) == 400
    assert dataset.classes == frozenset(range(10))


def test_default_grid():
    grid = DatasetConfig().grid

    assert len(grid) == 10
    assert grid.values_of(0) == (-1.0, 0.0)
    assert grid.values_of(9) == (1.0, 4.0)
    assert grid.class_of(1.0, 2.0) == 7


def test_grid_rejects_unknown_point():
    with raises(ConfigurationError):
        ClassGrid((0.0,), (1.0,)).class_of(1.0, 1.0)


def test_empty_dataset():
    dataset = generate_dataset(DatasetConfig(samples_per_class=0))

    assert len(dataset) == 0
    assert dataset.dim == 18


def test_noise_free_samples_are_grid_points():
    config = DatasetConfig(noise_sd=0.0, cov_param=0.0, extra_dims=0, samples_per_class=3)
    dataset = generate_dataset(config)

    for rep in dataset:
        assert tuple(rep.h) == (rep.x1, rep.x2)
        assert config.grid.class_of(rep.x1, rep.x2) == rep.class_label


def test_regeneration_is_bit_identical():
    config = DatasetConfig(samples_per_class=25, seed=9)

    assert np.array_equal(generate_dataset(config).h, generate_dataset(config).h)


def test_different_seeds_differ():
    first = generate_dataset(DatasetConfig(samples_per_class=5, seed=1))
    second = generate_dataset(DatasetConfig(samples_per_class=5, seed=2))

    assert not np.array_equal(first.h, second.h)


def test_feature_statistics():
    config = DatasetConfig(x1_values=(0.0,), x2_values=(1.0,), samples_per_class=10000, extra_dims=2, seed=4)
    dataset = generate_dataset(config)

    features = dataset.h[:, :2]
    tolerance = 5 * config.noise_sd / np.sqrt(10000)

    assert np.allclose(features.mean(axis=0), [0.0, 1.0], atol=tolerance)
    assert abs(np.corrcoef(features.T)[0, 1] - config.cov_param) < 0.05
    assert np.allclose(dataset.h[:, 2:].std(axis=0), 1.0, atol=0.05)


@mark.parametrize("kwargs", (
        {"x1_values": ()},
        {"x2_values": (1.0, 1.0)},
        {"noise_sd": -0.1},
        {"cov_param": 1.0},
        {"extra_dims": -1},
))
def test_invalid_config(kwargs):
    with raises(ConfigurationError):
        DatasetConfig(**kwargs)


def test_dataset_is_read_only(dataset: Dataset):
    with raises(ValueError):
        dataset.h[0, 0] = 1.0


def test_dataset_sequence(dataset: Dataset):
    rep = dataset[5]

    assert rep.class_label == int(dataset.labels[5])
    assert len(dataset[10:20]) == 10
    assert dataset.of_classes([2, 3]).classes == frozenset({2, 3})


def test_dataset_dimension_mismatch():
    with raises(DimensionError):
        Dataset(np.zeros((3, 2)), [0, 1], [0, 0], [0, 0])


def test_default_partitions(dataset: Dataset):
    (first, second) = split_partitions(dataset, Scheme.Default)

    assert first.name == PartitionName.DefaultP1
    assert second.name == PartitionName.DefaultP2

    assert len(first.classes) == 8
    assert len(second.classes) == 8

    withheld_first = dataset.classes - first.classes
    withheld_second = dataset.classes - second.classes

    assert len(withheld_first) == 2
    assert withheld_first <= second.classes
    assert withheld_second <= first.classes


def test_generic_grid_partitions(dataset: Dataset):
    (first, second) = split_partitions(dataset.of_classes([0, 2, 4, 5, 7]), Scheme.Default)

    assert first.classes == frozenset({0, 4, 5, 7})
    assert second.classes == frozenset({0, 2, 4, 7})


def test_ood_partitions(dataset: Dataset):
    (dense, sparse) = split_partitions(dataset, Scheme.OOD)

    assert dense.classes == dense_classes
    assert sparse.classes == sparse_classes
    assert not dense.classes & sparse.classes

    grid = DatasetConfig().grid

    def spacing(classes):
        points = np.array([grid.values_of(c) for c in classes])
        return min(np.linalg.norm(p - q) for (i, p) in enumerate(points) for q in points[i + 1:])

    assert spacing(dense.classes) < spacing(sparse.classes)


def test_partition_splits_cover_classes(dataset: Dataset):
    for split in split_partitions(dataset, Scheme.Default, seed=2):
        pool = np.union1d(split.train, split.validation)

        assert not np.intersect1d(split.train, split.validation).size
        assert np.array_equal(pool, dataset.indices_of(split.classes))
        assert split.train.size == round(0.8 * pool.size)


def test_split_is_deterministic(dataset: Dataset):
    (a, _) = split_partitions(dataset, Scheme.Default, seed=5)
    (b, _) = split_partitions(dataset, Scheme.Default, seed=5)

    assert np.array_equal(a.train, b.train)


def test_single_class_partition_error(dataset: Dataset):
    with raises(PartitionError):
        split_partitions(dataset.of_classes([0]), Scheme.Default)


def test_ood_needs_all_classes(dataset: Dataset):
    with raises(PartitionError):
        split_partitions(dataset.of_classes(range(8)), Scheme.OOD)


def test_train_validation_split_fraction():
    with raises(ConfigurationError):
        train_validation_split(np.arange(10), Rng(0), 0.0)

    (train, validation) = train_validation_split(np.arange(10), Rng(0), 1.0)

    assert train.size == 10
    assert validation.size == 0


def test_csv_round_trip(dataset: Dataset, tmp_path: Path):
    path = tmp_path / "dataset.csv"

    write_csv(dataset, path)

    header = path.read_text(encoding="utf-8").splitlines()[0].split(",")

    assert header[:4] == ["class", "x1", "x2", "h_0"]
    assert len(header) == 3 + dataset.dim

    loaded = read_csv(path)

    assert np.array_equal(loaded.h, dataset.h)
    assert np.array_equal(loaded.labels, dataset.labels)


def test_csv_bad_header(tmp_path: Path):
    path = tmp_path / "bad.csv"
    path.write_text("label,a,b\n", encoding="utf-8")

    with raises(ConfigurationError):
        read_csv(path)


def test_class_means(dataset: Dataset):
    means = class_means(dataset)

    assert means is not None
    assert means.shape == (10, 18)
    assert np.allclose(means[:, :2], np.array(DatasetConfig().grid.points), atol=0.1)
    assert class_means(Dataset.empty(3)) is None
