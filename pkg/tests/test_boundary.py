import numpy as np
import pytest

from samplecert.boundary import BoundarySearchConfig, boundary_distance_histogram, closest_boundary_sample
from samplecert.classifiers import LinearClassifier, TrainConfig, margins, predict, train_classifier
from samplecert.datamodel import Dataset
from samplecert.errors import DomainError, SearchFailure


def projection(w, b, x):
    return x - (w @ x + b) / (w @ w) * w


def other_side_pool(w, b, n=20, seed=0):
    # points with w.x + b < 0, i.e. predicted class 0
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(n, w.size)) * 3
    s = P @ w + b
    P[s >= 0] -= 2 * ((s[s >= 0] + 1.0) / (w @ w))[:, None] * w
    return P


def test_worked_example_three_four():
    w = np.array([3.0, 4.0])
    model = LinearClassifier.binary(w, 0.0)
    res = closest_boundary_sample(model, [3.0, 4.0], 1, BoundarySearchConfig(other_side_pool(w, 0.0)))
    assert res.distance == pytest.approx(5.0, abs=1e-6)
    assert np.allclose(res.boundary_point, 0.0, atol=1e-6)
    assert res.converged


def test_point_on_boundary_needs_no_iterations():
    model = LinearClassifier.binary([1.0, 0.0], 0.0)
    res = closest_boundary_sample(model, [0.0, 2.0], 1, BoundarySearchConfig(np.array([[-1.0, 0.0]])))
    assert res.distance == 0.0 and res.iterations_used == 0


def test_linear_projection_exact_on_random_cases():
    rng = np.random.default_rng(1)
    for case in range(100):
        d = int(rng.integers(2, 6))
        w, b = rng.normal(size=d), float(rng.normal())
        x = rng.normal(size=d) * 2
        y = 1 if w @ x + b > 0 else 0
        model = LinearClassifier.binary(w, b)
        sign = 1 if y == 1 else -1
        pool = other_side_pool(sign * w, sign * b, seed=case)
        res = closest_boundary_sample(model, x, y, BoundarySearchConfig(pool), seed=case)
        assert np.allclose(res.boundary_point, projection(w, b, x), atol=1e-6)
        assert res.distance == pytest.approx(abs(w @ x + b) / np.linalg.norm(w), abs=1e-6)


def test_mlp_results_land_on_boundary(mixture):
    model, _ = train_classifier(mixture, TrainConfig(steps=150, seed=2))
    pred = predict(model, mixture.X)
    for i in range(20):
        y = int(pred[i])
        cfg = BoundarySearchConfig(mixture.X[pred != y])
        res = closest_boundary_sample(model, mixture.X[i], y, cfg, seed=i)
        assert res.residual_margin <= 1e-3
        assert res.distance <= np.min(np.linalg.norm(mixture.X[pred != y] - mixture.X[i], axis=1)) + 1e-9


def test_more_iterations_never_increase_distance(mixture):
    model, _ = train_classifier(mixture, TrainConfig(steps=150, seed=2))
    pred = predict(model, mixture.X)
    pool = mixture.X[pred != pred[0]]
    prev = np.inf
    for iters in (1, 3, 10, 40):
        d = closest_boundary_sample(model, mixture.X[0], int(pred[0]), BoundarySearchConfig(pool, max_iters=iters)).distance
        assert d <= prev + 1e-12
        prev = d


def test_no_pool_point_on_far_side_fails():
    model = LinearClassifier.binary([1.0, 0.0], 0.0)
    with pytest.raises(SearchFailure):
        closest_boundary_sample(model, [1.0, 0.0], 1, BoundarySearchConfig(np.array([[2.0, 0.0]])))


def test_config_validation():
    with pytest.raises(DomainError):
        BoundarySearchConfig(np.zeros((0, 2)))
    with pytest.raises(DomainError):
        BoundarySearchConfig(np.zeros((1, 2)), tol=0.0)


def test_equal_distances_give_single_nonempty_bin():
    model = LinearClassifier.binary([1.0, 0.0], 0.0)
    X = np.column_stack([np.full(10, 2.0), np.linspace(-3, 3, 10)])
    hist = boundary_distance_histogram(model, Dataset(X, np.ones(10, int), 2), 1,
                                       BoundarySearchConfig(np.array([[-1.0, 0.0]])))
    assert np.count_nonzero(hist.counts) == 1 and hist.counts.sum() == 10


def test_two_clusters_give_bimodal_histogram():
    model = LinearClassifier.binary([1.0, 0.0], 0.0)
    rng = np.random.default_rng(0)
    near = np.column_stack([1.0 + 0.05 * rng.normal(size=30), rng.normal(size=30)])
    far = np.column_stack([3.0 + 0.05 * rng.normal(size=30), rng.normal(size=30)])
    X = np.vstack([near, far])
    hist = boundary_distance_histogram(model, Dataset(X, np.ones(60, int), 2), 1,
                                       BoundarySearchConfig(np.array([[-1.0, 0.0]])), bins=10)
    assert np.allclose(hist.distances, X[:, 0], atol=1e-6)
    nz = np.flatnonzero(hist.counts)
    # two occupied groups separated by empty bins
    assert hist.counts[: nz[0] + 3].sum() == 30 and hist.counts[nz[-1] - 2:].sum() == 30
    assert np.all(hist.counts[nz[0] + 3: nz[-1] - 2] == 0)


def test_empty_input_gives_empty_histogram():
    model = LinearClassifier.binary([1.0, 0.0], 0.0)
    hist = boundary_distance_histogram(model, Dataset(np.zeros((0, 2)), np.zeros(0, int), 2), 1,
                                       BoundarySearchConfig(np.array([[-1.0, 0.0]])))
    assert hist.counts.size == 0 and hist.distances.size == 0


def test_failures_are_recorded_not_raised(tmp_path):
    model = LinearClassifier.binary([1.0, 0.0], 0.0)
    X = np.array([[1.0, 0.0], [-1.0, 0.0]])
    hist = boundary_distance_histogram(model, Dataset(X, np.array([1, 0]), 2), [1, 0],
                                       BoundarySearchConfig(np.array([[-2.0, 0.0]])))
    assert hist.distances[0] == pytest.approx(1.0) and np.isnan(hist.distances[1])
    assert [i for i, _ in hist.failures] == [1]
    hist.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "index,distance,converged"
    assert margins(model, X, [1, 0])[1] > 0
