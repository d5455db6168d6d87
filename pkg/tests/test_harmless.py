import json

import numpy as np
from pytest import approx, fixture, raises

from divlab.errors import ConfigurationError, DimensionError
from divlab.harmless import Verdict, circuit_behavior, classify_divergence, local_projection, mlp_behavior
from divlab.neural import Mlp, MlpConfig
from divlab.numerics import Rng, pca
from divlab.pathology import builtin_circuits

class_a = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 1.0, 0.0]])
class_b = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0]])


@fixture
def plane() -> np.ndarray:
    rng = Rng(0)
    return np.column_stack((rng.normal(size=(20, 2)), np.zeros(20)))


def ignore_last(x) -> np.ndarray:
    return np.asarray(x)[:-1] * 2.0


def test_point_in_subspace_is_harmless(plane: np.ndarray):
    verdict = classify_divergence([0.3, -0.2, 0.0], plane, plane, ignore_last, n=5, r=2, epsilon=1e-9)

    assert verdict.verdict == Verdict.Harmless
    assert verdict.max_delta == approx(0.0, abs=1e-8)
    assert np.allclose(verdict.divergence_vector, 0.0, atol=1e-8)


def test_null_direction_is_harmless(plane: np.ndarray):
    verdict = classify_divergence([0.3, -0.2, 4.0], plane, plane, ignore_last, n=5, r=2, epsilon=1e-9)

    assert verdict.harmless
    assert np.allclose(verdict.divergence_vector, [0.0, 0.0, 4.0], atol=1e-8)
    assert len(verdict.per_eval_deltas) == 20


def test_mean_difference_patch_is_harmful():
    circuit = builtin_circuits()["mean_difference"]
    patched = [0.5, 0.5, 1.0, -0.5]

    verdict = classify_divergence(patched, class_a, np.vstack((class_a, class_b)), circuit_behavior(circuit),
                                  n=2, r=1, epsilon=1e-6)

    assert verdict.verdict == Verdict.Harmful
    assert verdict.max_delta > 1e-6
    assert np.allclose(verdict.divergence_vector, [0.0, 0.0, 0.0, -0.5])


def test_projected_patch_is_harmless():
    circuit = builtin_circuits()["mean_difference"]

    verdict = classify_divergence([0.5, 0.5, 1.0, 0.0], class_a, np.vstack((class_a, class_b)),
                                  circuit_behavior(circuit), n=2, r=1, epsilon=1e-6)

    assert verdict.harmless


def test_monotone_in_epsilon(plane: np.ndarray):
    rng = Rng(1)
    psi = lambda x: np.tanh(np.asarray(x))

    x_hat = rng.normal(size=(3,))

    loose = classify_divergence(x_hat, plane, plane, psi, n=6, r=1, epsilon=10.0)

    assert loose.harmless

    for epsilon in (10.0, 20.0, 100.0):
        verdict = classify_divergence(x_hat, plane, plane, psi, n=6, r=1, epsilon=epsilon)

        assert verdict.harmless
        assert verdict.max_delta == loose.max_delta


def test_divergence_orthogonal_to_subspace():
    rng = Rng(2)
    naturals = rng.normal(size=(30, 5))
    x_hat = rng.normal(size=(5,))

    verdict = classify_divergence(x_hat, naturals, naturals[:3], lambda x: x, n=8, r=3, epsilon=1.0)

    index = np.argsort(np.linalg.norm(naturals - x_hat, axis=1))[:8]
    basis = pca(naturals[index], 3)

    assert np.allclose(basis.components.T @ verdict.divergence_vector, 0.0, atol=1e-8)


def test_full_rank_neighborhood_is_harmless():
    rng = Rng(3)
    naturals = rng.normal(size=(12, 3))

    verdict = classify_divergence(naturals[:4].mean(axis=0), naturals, naturals, lambda x: x ** 2, n=12, r=3,
                                  epsilon=0.0)

    assert verdict.max_delta <= 1e-8


def test_local_projection_errors(plane: np.ndarray):
    with raises(ConfigurationError):
        local_projection([0.0, 0.0, 0.0], plane, n=1, r=1)

    with raises(ConfigurationError):
        local_projection([0.0, 0.0, 0.0], plane, n=21, r=1)

    with raises(ConfigurationError):
        local_projection([0.0, 0.0, 0.0], plane, n=3, r=-1)

    with raises(DimensionError):
        local_projection([0.0, 0.0], plane, n=3, r=1)


def test_behavior_shape_mismatch(plane: np.ndarray):
    def psi(x):
        return np.zeros(2) if x[2] == 0 else np.zeros(3)

    with raises(DimensionError):
        classify_divergence([0.0, 0.0, 1.0], plane, plane, psi, n=3, r=2, epsilon=0.0)


def test_negative_epsilon(plane: np.ndarray):
    with raises(ConfigurationError):
        classify_divergence([0.0, 0.0, 1.0], plane, plane, ignore_last, n=3, r=2, epsilon=-1.0)


def test_verdict_json(plane: np.ndarray):
    verdict = classify_divergence([0.3, -0.2, 4.0], plane, plane[:2], ignore_last, n=5, r=2, epsilon=0.5)

    values = json.loads(verdict.to_json())

    assert values["verdict"] == "harmless"
    assert values["n"] == 5
    assert values["r"] == 2
    assert len(values["per_eval_deltas"]) == 2
    assert len(values["divergence_vector"]) == 3


def test_mlp_behavior_returns_logits():
    model = Mlp(MlpConfig(input_dim=3, hidden_width=4, n_classes=5)).eval()

    assert np.asarray(mlp_behavior(model)(np.zeros(3))).shape == (5,)
