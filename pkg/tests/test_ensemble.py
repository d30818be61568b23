import numpy as np
import pytest

from samplecert import ensemble as ens_mod
from samplecert.classifiers import LinearClassifier, MlpClassifier, TrainConfig, linear_smoothing_oracle, predict, train_classifier
from samplecert.datamodel import Dataset, NoiseAssignment, make_synthetic_gaussians
from samplecert.ensemble import (SmoothedEnsemble, base_noise_for, build_perturbed_dataset, certify_ensemble,
                                 ensemble_votes, load_ensemble, model_hash, save_ensemble, train_ensemble)
from samplecert.errors import DomainError, TrainingError
from samplecert.smoothing import ABSTAIN, VoteCounts, certify_counts

LIN = TrainConfig(arch="linear", steps=100, lr=0.1)


def test_perturbation_scale_and_determinism(mixture):
    tiny = NoiseAssignment.constant(1e-3)
    p = build_perturbed_dataset(mixture, tiny, seed_m=5)
    assert np.max(np.abs(p.X - mixture.X)) <= 1e-2
    assert np.array_equal(p.y, mixture.y)
    assert p.equals(build_perturbed_dataset(mixture, tiny, seed_m=5))
    assert not p.equals(build_perturbed_dataset(mixture, tiny, seed_m=6))


def test_perturbation_mean_is_zero():
    n = 10_000
    ds = Dataset(np.zeros((n, 2)), np.zeros(n, int), 2)
    d = build_perturbed_dataset(ds, NoiseAssignment.constant(0.7), seed_m=1).X
    se = 0.7 / np.sqrt(n)
    assert np.all(np.abs(d.mean(axis=0)) <= 3 * se)


def test_per_sample_sigma_is_used():
    ds = Dataset(np.zeros((2000, 1)), np.zeros(2000, int), 2)
    sig = NoiseAssignment({i: (0.1 if i < 1000 else 2.0) for i in range(2000)}, 0.5)
    d = build_perturbed_dataset(ds, sig, seed_m=0).X[:, 0]
    assert np.std(d[:1000]) == pytest.approx(0.1, rel=0.1) and np.std(d[1000:]) == pytest.approx(2.0, rel=0.1)


def test_single_member_ensemble(mixture):
    e = train_ensemble(mixture, NoiseAssignment.constant(0.25), 1, LIN, seed=0)
    votes = ensemble_votes(e, mixture.X[0], 0.25)
    assert votes.total == 1 and max(votes.counts) == 1


def test_rebuild_is_bit_identical(mixture):
    a = train_ensemble(mixture, NoiseAssignment.constant(0.25), 4, TrainConfig(steps=30), seed=3)
    b = train_ensemble(mixture, NoiseAssignment.constant(0.25), 4, TrainConfig(steps=30), seed=3, workers=3)
    assert a.equals(b)


def test_base_noise_tracks_parameters(small_mlp):
    mu = base_noise_for(small_mlp)
    assert np.array_equal(mu, base_noise_for(MlpClassifier(small_mlp.weights, small_mlp.biases)))
    W = [w.copy() for w in small_mlp.weights]
    W[0][0, 0] += 1e-6
    bumped = MlpClassifier(W, small_mlp.biases)
    assert model_hash(bumped) != model_hash(small_mlp)
    assert not np.allclose(base_noise_for(bumped), mu)


def test_identical_models_tiny_noise_vote_unanimously(small_mlp):
    e = SmoothedEnsemble([small_mlp] * 9, np.full((9, 2), 1e-9), list(range(9)))
    x = np.array([2.0, -1.0])
    votes = ensemble_votes(e, x, 1e-3)
    assert votes.counts[predict(small_mlp, x)] == 9


def test_vote_counts_invariant_under_permutation(mixture):
    e = train_ensemble(mixture, NoiseAssignment.constant(0.5), 6, LIN, seed=1)
    perm = [3, 0, 5, 1, 4, 2]
    p = SmoothedEnsemble([e.models[i] for i in perm], e.base_noise[perm], [e.dataset_noise_seeds[i] for i in perm])
    for x in mixture.X[:20]:
        assert ensemble_votes(e, x, 0.5) == ensemble_votes(p, x, 0.5)


def test_majority_vote_close_to_single_model_accuracy():
    train = make_synthetic_gaussians(200, [[-1.5, 0.0], [1.5, 0.0]], 0.8, seed=21)
    test = make_synthetic_gaussians(100, [[-1.5, 0.0], [1.5, 0.0]], 0.8, seed=22)
    cfg = TrainConfig(steps=200)
    single, _ = train_classifier(train, cfg)
    single_acc = np.mean(predict(single, test.X) == test.y)
    e = train_ensemble(train, NoiseAssignment.constant(0.25), 50, cfg, seed=21)
    votes = [ensemble_votes(e, x, 0.25).top_two()[0] for x in test.X]
    assert np.mean(np.array(votes) == test.y) >= single_acc - 0.02


def test_votes_approach_smoothed_probability_of_mean_model():
    train = make_synthetic_gaussians(200, [[-2.0, 0.0], [2.0, 0.0]], 0.5, seed=8)
    sigma = 0.5
    e = train_ensemble(train, NoiseAssignment.constant(sigma), 500, LIN, seed=8)
    W = np.mean([m.W for m in e.models], axis=0)
    b = np.mean([m.b for m in e.models], axis=0)
    mean_model = LinearClassifier(W, b)
    for x in ([0.2, 0.0], [0.5, 1.0], [-0.3, -0.5]):
        freq = ensemble_votes(e, x, sigma).counts[1] / 500
        assert abs(freq - linear_smoothing_oracle(mean_model, x, sigma)) <= 0.05


def test_certify_ensemble_contract(mixture):
    e = train_ensemble(mixture, NoiseAssignment.constant(0.5), 5, LIN, seed=2)
    with pytest.raises(DomainError):
        certify_ensemble(e, mixture.X[0], 0.0, 0.001)
    with pytest.raises(DomainError):
        ensemble_votes(e, [1.0, 2.0, 3.0], 0.5)


def test_certify_counts_composed_oracle_and_linearity():
    res = certify_counts(VoteCounts((998, 2)), 1.0, 0.001)
    assert res.label == 0 and res.radius > 0
    assert certify_counts(VoteCounts((500, 500)), 1.0, 0.001).label == ABSTAIN
    assert certify_counts(VoteCounts((998, 2)), 2.5, 0.001).radius == pytest.approx(2.5 * res.radius, rel=1e-14)


def test_divergent_member_aborts(monkeypatch, mixture):
    def boom(ds, cfg, K=None):
        raise TrainingError("loss diverged at step 3")

    monkeypatch.setattr(ens_mod, "train_classifier", boom)
    with pytest.raises(TrainingError, match="member diverged"):
        train_ensemble(mixture, NoiseAssignment.constant(0.5), 3, LIN, seed=0)


def test_save_load_round_trip(tmp_path, mixture):
    e = train_ensemble(mixture, NoiseAssignment.constant(0.5), 3, TrainConfig(steps=20), seed=4)
    path = save_ensemble(e, tmp_path / "ens")
    back = load_ensemble(path)
    assert back.equals(e)
    assert load_ensemble(tmp_path / "ens").equals(e)
