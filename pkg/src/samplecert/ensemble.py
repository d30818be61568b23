"""Ensembles of models trained on noise-perturbed copies of a training set.

Member ``m`` is trained on ``D + {sigma_i * b_{m,i}}`` and carries a stored
base-noise vector ``mu_m ~ N(0, I_d)`` seeded by a 64-bit hash of the
member's canonical parameter bytes. At inference member ``m`` votes on
``x + sigma * mu_m``; the same ``mu_m`` is reused for every query.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .classifiers import Classifier, TrainConfig, load_model, predict, save_model, train_classifier
from .datamodel import Dataset, NoiseAssignment
from .errors import DomainError, ParseError, TrainingError
from .parallel import pmap
from .smoothing import CertificationResult, VoteCounts, certify_counts

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "samplecert-ensemble"
MANIFEST_VERSION = 1


def model_hash(model: Classifier) -> int:
    return rng.hash64(model.canonical_bytes())


def base_noise_for(model: Classifier) -> np.ndarray:
    return np.random.default_rng(model_hash(model)).standard_normal(model.dim)


@dataclass
class SmoothedEnsemble:
    models: list[Classifier]
    base_noise: np.ndarray  # (M, d)
    dataset_noise_seeds: list[int]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.base_noise = np.asarray(self.base_noise, dtype=np.float64)
        if not (len(self.models) == self.base_noise.shape[0] == len(self.dataset_noise_seeds)):
            raise DomainError("models, base noise and dataset seeds must all have length M")

    @property
    def size(self) -> int:
        return len(self.models)

    @property
    def num_classes(self) -> int:
        return self.models[0].num_classes

    @property
    def dim(self) -> int:
        return self.models[0].dim

    def equals(self, other: "SmoothedEnsemble") -> bool:
        return (
            self.size == other.size
            and all(a.equals(b) for a, b in zip(self.models, other.models))
            and np.array_equal(self.base_noise, other.base_noise)
            and self.dataset_noise_seeds == other.dataset_noise_seeds
        )


def build_perturbed_dataset(poisoned: Dataset, assignment: NoiseAssignment, seed_m: int) -> Dataset:
    """Add sigma_i * b_{m,i} to every row; row i of one (n, d) draw from ``seed_m`` is b_{m,i}."""
    b = rng.stream(seed_m, "dataset-noise").standard_normal((poisoned.n, poisoned.dim))
    sig = assignment.as_array(poisoned.n)
    return poisoned.with_features(poisoned.X + sig[:, None] * b)


def member_seed(seed: int, m: int) -> int:
    return rng.derive(seed, "member", m)


def _train_member(args) -> Classifier:
    poisoned, assignment, seed, m, cfg = args
    seed_m = member_seed(seed, m)
    data_m = build_perturbed_dataset(poisoned, assignment, seed_m)
    cfg_m = TrainConfig(cfg.arch, cfg.hidden, cfg.steps, cfg.lr, cfg.weight_decay,
                        rng.derive(seed_m, "init"))
    model, report = train_classifier(data_m, cfg_m, poisoned.num_classes)
    log.debug("member %d: train acc %.4f", m, report.train_accuracy)
    return model


def train_ensemble(poisoned: Dataset, assignment: NoiseAssignment, M: int, cfg: TrainConfig,
                   seed: int, workers: int = 1) -> SmoothedEnsemble:
    """Train M members. Any divergent member aborts the build, since M is the
    sample size of the confidence bound."""
    if M < 1:
        raise DomainError("ensemble size M must be >= 1")
    try:
        models = pmap(_train_member, [(poisoned, assignment, seed, m, cfg) for m in range(M)], workers)
    except TrainingError as exc:
        raise TrainingError(f"ensemble member diverged: {exc}") from exc
    manifest = {
        "seed": seed,
        "train_config": {"arch": cfg.arch, "hidden": list(cfg.hidden), "steps": cfg.steps,
                         "lr": cfg.lr, "weight_decay": cfg.weight_decay},
        "default_sigma": assignment.default_sigma,
        "hashes": [f"{model_hash(m):016x}" for m in models],
    }
    return SmoothedEnsemble(models, np.stack([base_noise_for(m) for m in models]),
                            [member_seed(seed, m) for m in range(M)], manifest)


def ensemble_votes(ens: SmoothedEnsemble, x, sigma: float) -> VoteCounts:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (ens.dim,):
        raise DomainError(f"input shape {x.shape} does not match ensemble dimension {ens.dim}")
    counts = np.zeros(ens.num_classes, dtype=np.int64)
    for model, mu in zip(ens.models, ens.base_noise):
        counts[predict(model, x + sigma * mu)] += 1
    return VoteCounts(tuple(int(c) for c in counts))


def certify_ensemble(ens: SmoothedEnsemble, x, sigma_star: float, alpha: float) -> CertificationResult:
    if not sigma_star > 0:
        raise DomainError("sigma must be positive")
    return certify_counts(ensemble_votes(ens, x, sigma_star), sigma_star, alpha)


# ------------------------------------------------------------------ persistence


def save_ensemble(ens: SmoothedEnsemble, directory: str | Path, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for m, model in enumerate(ens.models):
        name = f"model_{m:04d}.json"
        save_model(model, directory / name)
        files.append(name)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "M": ens.size,
        "dim": ens.dim,
        "num_classes": ens.num_classes,
        "models": files,
        "dataset_noise_seeds": [str(s) for s in ens.dataset_noise_seeds],
        "base_noise": ens.base_noise.tolist(),
        **ens.manifest,
        **(extra or {}),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_ensemble(manifest_path: str | Path) -> SmoothedEnsemble:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    data = json.loads(manifest_path.read_text())
    if data.get("format") != MANIFEST_FORMAT or data.get("version") != MANIFEST_VERSION:
        raise ParseError(f"{manifest_path}: not a version-{MANIFEST_VERSION} ensemble manifest")
    models = [load_model(manifest_path.parent / f) for f in data["models"]]
    base = np.array(data["base_noise"], dtype=np.float64)
    for m, model in enumerate(models):
        if not np.array_equal(base_noise_for(model), base[m]):
            raise ParseError(f"{manifest_path}: base noise of member {m} does not match its parameters")
    keep = {k: v for k, v in data.items() if k not in
            ("format", "version", "M", "dim", "num_classes", "models", "dataset_noise_seeds", "base_noise")}
    return SmoothedEnsemble(models, base, [int(s) for s in data["dataset_noise_seeds"]], keep)
