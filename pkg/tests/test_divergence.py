import math
from itertools import permutations, product

import numpy as np
from pytest import approx, fixture, mark, raises
from sklearn.neighbors import NearestNeighbors

from divlab.divergence import ComparisonSet, DivergenceReport, LocalReconstruction, LocalTangentModel, Metric, \
    ReportParams, emd_divergence, full_report, kde_neg_log_density, llr_error, local_pca_distance, \
    min_cost_pairing_distance, nearest_distance, pca_scatter, row_emd, silverman_bandwidth
from divlab.errors import ConfigurationError, CosineUndefinedError, DimensionError, EmptyInputError
from divlab.numerics import Rng
from divlab.synthdata import DatasetConfig, generate_dataset


@fixture
def plane() -> np.ndarray:
    return np.array([(x, y, 0.0) for (x, y) in product(range(6), range(6))], dtype=float)


def rotation(dim: int, seed: int) -> np.ndarray:
    (q, _) = np.linalg.qr(Rng(seed).normal(size=(dim, dim)))
    return q


def test_emd_self():
    points = Rng(0).normal(size=(25, 4))

    assert emd_divergence(points, points) <= 1e-6


def test_emd_singletons():
    assert emd_divergence([[0.0, 0.0]], [[3.0, 4.0]]) == approx(12.5, abs=1e-3)


def test_row_emd_all_dims_equals_emd():
    rng = Rng(1)
    (a, b) = (rng.normal(size=(10, 3)), rng.normal(size=(12, 3)) + 0.5)

    assert row_emd(a, b, (0, 1, 2)) == approx(emd_divergence(a, b), abs=1e-9)
    assert row_emd(a, b, (0, 1, 2), scale=4.0) == approx(emd_divergence(a, b) / 4.0, abs=1e-9)


def halves(rows: int) -> tuple:
    h = generate_dataset(DatasetConfig()).h
    order = Rng(3).permutation(h.shape[0])

    return h[order[:rows]], h[order[rows:2 * rows]]


def translation_gap(a: np.ndarray, b: np.ndarray, shift: float) -> float:
    t = np.full(a.shape[1], shift)

    return float(t @ t / 2.0 + (b.mean(axis=0) - a.mean(axis=0)) @ t)


def test_emd_on_clustered_features():
    (a, b) = halves(300)

    base = emd_divergence(a, b)

    assert -1e-9 <= base < 0.5
    assert emd_divergence(a, b + 0.5) - base == approx(translation_gap(a, b, 0.5), rel=1e-3, abs=1e-3)


@mark.slow
@mark.parametrize(("scale", "shift"), product((1.0, 5.0), (0.0, 0.1, 1.0)))
def test_emd_converges_at_full_scale(scale: float, shift: float):
    (a, b) = halves(1000)
    (a, b) = (scale * a, scale * b)

    assert a.shape == (1000, 18)

    base = emd_divergence(a, b)
    shifted = emd_divergence(a, b + shift)

    assert math.isfinite(base) and base >= -1e-9
    assert shifted - base == approx(translation_gap(a, b, shift), rel=1e-3, abs=1e-3)


def test_row_emd_ignores_other_dims():
    a = [[0.0, 0.0], [1.0, 0.0]]
    b = [[0.0, 5.0], [1.0, -3.0]]

    assert row_emd(a, b, (0,)) == approx(0.0, abs=1e-6)


def test_row_emd_needs_dims():
    with raises(EmptyInputError):
        row_emd([[0.0]], [[1.0]], ())


def test_nearest_distance_subset():
    reference = Rng(2).normal(size=(15, 3))

    assert nearest_distance(reference, reference[3:7], Metric.L2) == 0.0
    assert nearest_distance(reference, reference[3:7], Metric.Cosine) == approx(0.0, abs=1e-12)


def test_nearest_distance_single_query():
    assert nearest_distance([[0.0, 0.0], [10.0, 0.0]], [[0.0, 3.0]], Metric.L2) == approx(3.0)


@mark.parametrize("metric", (Metric.L2, Metric.Cosine))
def test_nearest_distance_brute_force(metric: Metric):
    rng = Rng(3)
    (reference, queries) = (rng.normal(size=(20, 4)), rng.normal(size=(10, 4)))

    def distance(u, v):
        if metric == Metric.L2:
            return np.linalg.norm(u - v)

        return 1.0 - u @ v / (np.linalg.norm(u) * np.linalg.norm(v))

    expected = np.mean([min(distance(r, q) for r in reference) for q in queries])

    assert nearest_distance(reference, queries, metric) == approx(expected)


def test_cosine_zero_vector():
    with raises(CosineUndefinedError):
        nearest_distance([[1.0, 0.0]], [[0.0, 0.0]], Metric.Cosine)


def test_pairing_permutation():
    points = Rng(4).normal(size=(8, 3))

    assert min_cost_pairing_distance(points, points[::-1], Metric.L2) == approx(0.0, abs=1e-12)


def test_pairing_single():
    assert min_cost_pairing_distance([[0.0, 0.0]], [[3.0, 4.0]], Metric.L2) == approx(5.0)


@mark.parametrize("metric", (Metric.L2, Metric.Cosine))
def test_pairing_brute_force(metric: Metric):
    rng = Rng(5)
    (a, b) = (rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))

    def cost(p):
        return np.mean([min_cost_pairing_distance(a[[i]], b[[p[i]]], metric) for i in range(5)])

    expected = min(map(cost, permutations(range(5))))

    assert min_cost_pairing_distance(a, b, metric) == approx(expected)


def test_pairing_size_mismatch():
    with raises(DimensionError):
        min_cost_pairing_distance([[0.0]], [[1.0], [2.0]], Metric.L2)


def test_nearest_dominated_by_pairing():
    rng = Rng(6)

    for _ in range(5):
        (a, b) = (rng.normal(size=(7, 2)), rng.normal(size=(7, 2)))

        for metric in (Metric.L2, Metric.Cosine):
            assert nearest_distance(a, b, metric) <= min_cost_pairing_distance(a, b, metric) + 1e-12


def test_local_pca_reference_point(plane: np.ndarray):
    assert local_pca_distance(plane, plane[7]) == approx(0.0, abs=1e-9)


def test_local_pca_plane_offset(plane: np.ndarray):
    assert local_pca_distance(plane, [2.3, 2.7, 0.7]) == approx(0.7, abs=1e-6)


def test_local_pca_identical_references():
    reference = np.tile([1.0, 2.0, 3.0], (5, 1))
    v = np.array([2.0, 2.0, 5.0])

    assert local_pca_distance(reference, v, k=3) == approx(np.linalg.norm(v - reference[0]))


def test_local_pca_invalid_k(plane: np.ndarray):
    with raises(ConfigurationError):
        LocalTangentModel(plane, k=1)

    with raises(ConfigurationError):
        LocalTangentModel(plane[:4], k=5)


def test_local_metrics_rotation_invariant():
    rng = Rng(7)
    reference = rng.normal(size=(40, 3)) * [3.0, 1.0, 0.2]
    v = rng.normal(size=(3,))

    q = rotation(3, 8)

    assert local_pca_distance(reference @ q.T, q @ v) == approx(local_pca_distance(reference, v), abs=1e-6)
    assert llr_error(reference @ q.T, q @ v) == approx(llr_error(reference, v), abs=1e-6)


def test_llr_mean_of_neighbors():
    neighbors = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])

    assert llr_error(neighbors, neighbors.mean(axis=0), k=4, tikhonov=1e-6) <= 1e-3


def test_llr_single_neighbor():
    assert llr_error([[0.0, 0.0], [5.0, 5.0]], [1.0, 1.0], k=1) == approx(math.sqrt(2.0))


def test_llr_orthogonal_offset():
    neighbors = np.array([[1.0, 1.0, 0.0], [-1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [-1.0, -1.0, 0.0]])

    assert llr_error(neighbors, [0.2, 0.1, 0.5], k=4, tikhonov=1e-6) == approx(0.5, abs=1e-3)


def test_llr_reuses_one_index(monkeypatch):
    rng = Rng(10)
    (reference, queries) = (rng.normal(size=(30, 3)), rng.normal(size=(6, 3)))

    expected = [llr_error(reference, v, k=5) for v in queries]

    fits = []
    fit = NearestNeighbors.fit

    def counting_fit(self, *args, **kwargs):
        fits.append(self)
        return fit(self, *args, **kwargs)

    monkeypatch.setattr(NearestNeighbors, "fit", counting_fit)

    model = LocalReconstruction(reference, k=5)

    assert [model.error(v) for v in queries] == approx(expected)
    assert len(fits) == 1
    assert LocalReconstruction(reference[:3], k=5).k == 3


def test_llr_invalid_k():
    with raises(ConfigurationError):
        llr_error([[0.0]], [1.0], k=0)


def test_kde_single_reference():
    assert kde_neg_log_density([[1.0, 2.0, 3.0]], [1.0, 2.0, 3.0], bandwidth=0.5) == approx(3 * math.log(0.5))


def test_kde_two_references():
    assert kde_neg_log_density([[0.0, 0.0], [2.0, 0.0]], [1.0, 0.0], bandwidth=1.0) == approx(0.5)


def test_kde_monotone_on_ray():
    reference = Rng(9).normal(size=(30, 2))
    direction = np.array([0.6, 0.8])

    values = [kde_neg_log_density(reference, t * direction + 10.0, bandwidth=0.7) for t in range(5)]

    assert all(a < b for (a, b) in zip(values, values[1:]))


def test_kde_far_point_is_finite():
    assert math.isfinite(kde_neg_log_density([[0.0, 0.0], [1.0, 0.0]], [1e4, 0.0], bandwidth=0.1))


def test_kde_duplicate_increases_density():
    rng = Rng(10)
    (reference, v) = (rng.normal(size=(20, 2)), rng.normal(size=(2,)))

    extended = np.vstack((reference, v))

    assert kde_neg_log_density(extended, v, 0.5) < kde_neg_log_density(reference, v, 0.5)


def test_silverman_bandwidth():
    points = Rng(11).normal(size=(100, 2))
    sigma = np.mean(np.std(points, axis=0, ddof=1))

    assert silverman_bandwidth(points) == approx(sigma * (4.0 / (4 * 100)) ** (1.0 / 6))

    with raises(ConfigurationError):
        silverman_bandwidth([[1.0, 1.0]])

    with raises(ConfigurationError):
        silverman_bandwidth([[1.0, 1.0], [1.0, 1.0]])


def test_kde_invalid_bandwidth():
    with raises(ConfigurationError):
        kde_neg_log_density([[0.0]], [0.0], bandwidth=0.0)


def test_comparison_set_shapes():
    with raises(DimensionError):
        ComparisonSet(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((1, 2)))

    with raises(DimensionError):
        ComparisonSet(np.zeros((3, 2)), np.zeros((2, 3)), np.zeros((2, 3)))


@fixture
def comparison() -> ComparisonSet:
    rng = Rng(12)

    natural = rng.normal(size=(40, 3))
    truth = rng.normal(size=(30, 3))

    return ComparisonSet(natural, truth + rng.normal(0.0, 0.3, (30, 3)), truth)


def test_full_report(comparison: ComparisonSet):
    report = full_report(comparison)

    assert all(map(math.isfinite, report.to_dict().values()))
    assert report.emd >= -1e-9
    assert report.baseline_emd >= -1e-9
    assert report.nearest_l2 <= report.min_l2_pairing + 1e-12


def test_report_of_ground_truth(comparison: ComparisonSet):
    exact = ComparisonSet(comparison.natural, comparison.ground_truth, comparison.ground_truth)
    report = full_report(exact)

    assert report.emd == approx(report.baseline_emd, abs=1e-6)


def test_report_is_deterministic(comparison: ComparisonSet):
    params = ReportParams(max_samples=20, seed=3)

    assert full_report(comparison, params) == full_report(comparison, params)


def test_report_needs_intervened_vectors():
    with raises(EmptyInputError):
        full_report(ComparisonSet(np.ones((5, 3)), np.zeros((0, 3)), np.zeros((0, 3))))


def test_report_json(comparison: ComparisonSet):
    report = full_report(comparison, ReportParams(bandwidth=0.5))

    assert DivergenceReport.from_json(report.to_json()) == report
    assert list(report.to_dict()) == ["emd", "baseline_emd", "row_emd", "nearest_cos", "nearest_l2",
                                      "min_cos_pairing", "min_l2_pairing", "local_pca", "llr", "kde_neg_log"]

    with raises(ConfigurationError):
        DivergenceReport.from_dict({"emd": 1.0})


def test_pca_scatter():
    rng = Rng(13)
    scatter = pca_scatter(rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), [0, 1, 2, 3])

    rows = scatter.rows()

    assert len(rows) == 6
    assert [r[0] for r in rows] == ["natural"] * 4 + ["intervened"] * 2
    assert [r[1] for r in rows] == [0, 1, 2, 3, -1, -1]
    assert scatter.coordinates.shape == (6, 2)
