"""Backdoor poisoning: triggers, label generators, and margin-aware selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng
from .classifiers import Classifier, margins
from .datamodel import Dataset
from .errors import ConfigError, DomainError, ShapeError

TRIGGER_KINDS = ("one-pixel", "four-pixel", "blending")


@dataclass(frozen=True)
class TriggerSpec:
    """Trigger pattern with a fixed l2 budget.

    Pixel kinds default to the last coordinate(s) of the flat feature vector;
    the four-pixel budget is split equally so each entry is ``budget / 2``.
    """

    kind: str = "one-pixel"
    budget: float = 0.1
    coordinates: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ConfigError(f"unknown trigger kind {self.kind!r}")
        if not self.budget > 0:
            raise DomainError("trigger budget must be positive")


@dataclass(frozen=True)
class LabelGenerator:
    mode: str = "all-to-one"
    target: int = 0

    def __call__(self, y, num_classes: int):
        if self.mode == "all-to-one":
            if not 0 <= self.target < num_classes:
                raise ConfigError(f"target label {self.target} outside [0, {num_classes})")
            return np.full_like(np.asarray(y), self.target)
        if self.mode == "all-to-all":
            return (np.asarray(y) + 1) % num_classes
        raise ConfigError(f"unknown attack mode {self.mode!r}")


@dataclass(frozen=True)
class MapConfig:
    k_vulnerable: int
    feature_metric: str = "l2"


def make_trigger_delta(spec: TriggerSpec, d: int) -> np.ndarray:
    delta = np.zeros(d)
    if spec.kind == "blending":
        pattern = rng.stream(spec.seed, "blend-pattern").standard_normal(d)
        return spec.budget * pattern / np.linalg.norm(pattern)
    count = 1 if spec.kind == "one-pixel" else 4
    coords = spec.coordinates if spec.coordinates is not None else tuple(range(d - count, d))
    if len(coords) != count or len(set(coords)) != count:
        raise ConfigError(f"{spec.kind} trigger needs exactly {count} distinct coordinates")
    if min(coords) < 0 or max(coords) >= d:
        raise ShapeError(f"trigger coordinates {coords} out of range for dimension {d}")
    delta[list(coords)] = spec.budget / np.sqrt(count)
    return delta


def apply_test_trigger(x, spec: TriggerSpec) -> np.ndarray:
    """x + delta. Applying twice adds the trigger twice (not idempotent)."""
    x = np.asarray(x, dtype=np.float64)
    return x + make_trigger_delta(spec, x.shape[-1])


def poisoned_count(n: int, rate: float) -> int:
    return int(np.floor(rate * n + 1e-9))


def poison_dataset(
    clean: Dataset,
    spec: TriggerSpec,
    gen: LabelGenerator,
    rate: float,
    selection: str | Sequence[int] = "random",
    seed: int = 0,
) -> Dataset:
    """Trigger and relabel exactly floor(rate * n) samples.

    ``selection`` is ``"random"`` (uniform without replacement, drawn from
    ``seed``) or an explicit index set such as one returned by
    :func:`map_select_poison`.
    """
    n = clean.n
    budget = poisoned_count(n, rate)
    if budget < 1:
        raise ConfigError(f"poison rate {rate} selects no samples from n={n}")
    if isinstance(selection, str):
        if selection != "random":
            raise ConfigError(f"unknown selection {selection!r}; pass MAP indices explicitly")
        idx = np.sort(rng.stream(seed, "poison-select").choice(n, size=budget, replace=False))
    else:
        idx = np.unique(np.asarray(selection, dtype=np.int64))
        if idx.size != budget:
            raise ConfigError(f"selection has {idx.size} indices, need {budget}")
    delta = make_trigger_delta(spec, clean.dim)
    X = clean.X.copy()
    y = clean.y.copy()
    flags = np.zeros(n, bool)
    deltas = np.zeros_like(X)
    X[idx] += delta
    y[idx] = gen(clean.y[idx], clean.num_classes)
    flags[idx] = True
    deltas[idx] = delta
    return Dataset(X, y, clean.num_classes, flags, deltas)


def total_poison_norm(ds: Dataset) -> float:
    """sqrt(sum_i ||delta_i||^2) over the training set."""
    return float(np.sqrt(np.sum(ds.deltas**2)))


def map_select_vulnerable(model: Classifier, test: Dataset, k: int) -> np.ndarray:
    """Indices of the k test samples with smallest |margin| at their true label."""
    if not 0 <= k <= test.n:
        raise ConfigError(f"k={k} out of range for {test.n} test samples")
    m = np.abs(margins(model, test.X, test.y))
    order = np.lexsort((np.arange(test.n), m))
    return np.sort(order[:k])


def map_select_poison(train: Dataset, targets: np.ndarray, target_label: int, budget: int) -> np.ndarray:
    """Non-target-class training indices nearest (l2) to any vulnerable target."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    cand = np.flatnonzero(train.y != target_label)
    if cand.size < budget:
        raise ConfigError(f"only {cand.size} non-target candidates for a budget of {budget}")
    diff = train.X[cand, None, :] - targets[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1)).min(axis=1)
    order = np.lexsort((cand, dist))
    return np.sort(cand[order[:budget]])
