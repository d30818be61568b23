"""Core records: samples, datasets, noise assignments and run configuration."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng
from .errors import ConfigError, DomainError, ParseError, ShapeError

SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    trigger_delta: np.ndarray | None = None
    is_poisoned: bool = False


class Dataset:
    """Immutable labelled point set. Sample ``i`` is identified by its index.

    Arrays are stored column-wise (``X`` is n x d) and marked read-only.
    ``deltas`` is all-zero for rows whose ``poisoned`` flag is False.
    """

    def __init__(
        self,
        X: np.ndarray,
        y: np.ndarray,
        num_classes: int | None = None,
        poisoned: np.ndarray | None = None,
        deltas: np.ndarray | None = None,
        dim: int | None = None,
    ):
        X = np.array(X, dtype=np.float64)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, dim or 0)
        if X.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {X.shape}")
        n, d = X.shape
        y = np.array(y, dtype=np.int64).reshape(-1)
        if y.shape[0] != n:
            raise ShapeError(f"{n} feature rows but {y.shape[0]} labels")
        if not np.all(np.isfinite(X)):
            raise DomainError("features must be finite")
        if num_classes is None:
            num_classes = int(y.max()) + 1 if n else 0
        if n and (y.min() < 0 or y.max() >= num_classes):
            raise DomainError(f"labels must lie in [0, {num_classes})")
        poisoned = np.zeros(n, bool) if poisoned is None else np.array(poisoned, bool)
        deltas = np.zeros((n, d)) if deltas is None else np.array(deltas, dtype=np.float64)
        if poisoned.shape != (n,) or deltas.shape != (n, d):
            raise ShapeError("poison flags / deltas do not match the feature matrix")
        for a in (X, y, poisoned, deltas):
            a.setflags(write=False)
        self.X, self.y, self.poisoned, self.deltas = X, y, poisoned, deltas
        self.num_classes = int(num_classes)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Sample:
        flag = bool(self.poisoned[i])
        return Sample(self.X[i], int(self.y[i]), self.deltas[i] if flag else None, flag)

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(self.n))

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes,
                       self.poisoned[idx], self.deltas[idx], dim=self.dim)

    def with_features(self, X: np.ndarray) -> "Dataset":
        return Dataset(X, self.y, self.num_classes, self.poisoned, self.deltas)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.poisoned, other.poisoned)
            and np.array_equal(self.deltas, other.deltas)
        )


@dataclass
class NoiseAssignment:
    per_sample_sigma: dict[int, float]
    default_sigma: float
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if self.default_sigma < self.sigma_floor:
            raise DomainError(f"default sigma {self.default_sigma} below floor {self.sigma_floor}")
        for i, s in self.per_sample_sigma.items():
            if not s >= self.sigma_floor:
                raise DomainError(f"sigma for sample {i} is {s}, below floor {self.sigma_floor}")

    def sigma_for(self, i: int) -> float:
        return self.per_sample_sigma.get(i, self.default_sigma)

    def as_array(self, n: int) -> np.ndarray:
        return np.array([self.sigma_for(i) for i in range(n)])

    @classmethod
    def constant(cls, sigma: float) -> "NoiseAssignment":
        return cls({}, sigma)


# --------------------------------------------------------------------- CSV I/O


def _header(d: int, with_poison: bool) -> list[str]:
    cols = [f"f{j}" for j in range(d)] + ["label"]
    if with_poison:
        cols += ["poisoned"] + [f"delta{j}" for j in range(d)]
    return cols


def save_dataset(ds: Dataset, path: str | Path, with_poison: bool | None = None) -> None:
    """Write ``ds`` as CSV. Floats use ``repr`` so reloading is exact."""
    if with_poison is None:
        with_poison = bool(ds.poisoned.any())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(ds.dim, with_poison))
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.X[i]] + [str(int(ds.y[i]))]
            if with_poison:
                row += ["1" if ds.poisoned[i] else "0"]
                row += [repr(float(v)) for v in ds.deltas[i]]
            w.writerow(row)


def _parse_float(tok: str, lineno: int, col: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"line {lineno}: column {col!r}: not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"line {lineno}: column {col!r}: non-finite value {tok!r}")
    return v


def load_dataset(path: str | Path, num_classes: int | None = None) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    d = 0
    while d < len(header) and header[d] == f"f{d}":
        d += 1
    if d == 0 or d >= len(header) or header[d] != "label":
        raise ParseError(f"{path}: header must be f0..f{{d-1}},label[,poisoned,delta0..]")
    with_poison = len(header) > d + 1
    if with_poison and header != _header(d, True):
        raise ParseError(f"{path}: poison columns must be poisoned,delta0..delta{d - 1}")
    width = len(header)

    X, y, flags, deltas = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ShapeError(f"line {lineno}: expected {width} fields, got {len(row)}")
        X.append([_parse_float(t, lineno, header[j]) for j, t in enumerate(row[:d])])
        try:
            y.append(int(row[d]))
        except ValueError:
            raise ParseError(f"line {lineno}: label is not an integer: {row[d]!r}") from None
        if with_poison:
            if row[d + 1] not in ("0", "1"):
                raise ParseError(f"line {lineno}: poisoned flag must be 0 or 1")
            flags.append(row[d + 1] == "1")
            deltas.append([_parse_float(t, lineno, header[d + 2 + j])
                           for j, t in enumerate(row[d + 2:])])
    n = len(X)
    X_arr = np.array(X, dtype=np.float64).reshape(n, d)
    return Dataset(
        X_arr,
        np.array(y, dtype=np.int64),
        num_classes,
        np.array(flags, bool) if with_poison else None,
        np.array(deltas).reshape(n, d) if with_poison else None,
        dim=d,
    )


def make_synthetic_gaussians(
    n_per_class: int, means: Sequence[Sequence[float]], std: float, seed: int
) -> Dataset:
    """Isotropic Gaussian blobs, one per mean, ``n_per_class`` points each.

    Rows are grouped by class in ``means`` order.
    """
    if not std > 0:
        raise DomainError(f"std must be positive, got {std}")
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise ShapeError("need at least two mean vectors of equal dimension")
    gen = rng.stream(seed, "gaussians")
    K, d = means.shape
    X = np.concatenate([means[k] + std * gen.standard_normal((n_per_class, d)) for k in range(K)])
    y = np.repeat(np.arange(K), n_per_class)
    return Dataset(X.reshape(K * n_per_class, d), y, K, dim=d)


# ---------------------------------------------------------------- run config


def _floats(s: str) -> list[float]:
    return [float(t) for t in s.replace(";", ",").split(",") if t.strip()]


def _vectors(s: str) -> list[list[float]]:
    return [[float(t) for t in part.split(",")] for part in s.split(";") if part.strip()]


# (section, key, parser). Every key is required in a config file.
_SCHEMA = {
    "run": {"seed": int},
    "data": {"n_per_class": int, "n_test_per_class": int, "means": _vectors, "std": float},
    "attack": {
        "kind": str, "trigger_budget": float, "poison_rate": float, "attack_mode": str,
        "target_label": int, "selection": str, "k_vulnerable": int,
    },
    "model": {"hidden": int, "train_steps": int, "train_lr": float},
    "smoothing": {
        "sigma0_grid": _floats, "M": int, "T_train": int, "T_infer": int, "J": int,
        "alpha_lr": float, "alpha_conf": float, "temperature": float,
        "sigma_ceiling_factor": float, "base_copies": int,
    },
    "eval": {"radius_grid": _floats, "baseline": lambda s: s.strip().lower() in ("1", "true", "yes")},
}


@dataclass
class RunConfig:
    seed: int = 0
    # data
    n_per_class: int = 100
    n_test_per_class: int = 50
    means: list[list[float]] = field(default_factory=lambda: [[-1.5, 0.0], [1.5, 0.0]])
    std: float = 0.8
    # attack
    kind: str = "one-pixel"
    trigger_budget: float = 0.1
    poison_rate: float = 0.1
    attack_mode: str = "all-to-one"
    target_label: int = 0
    selection: str = "random"
    k_vulnerable: int = 10
    # model
    hidden: int = 16
    train_steps: int = 300
    train_lr: float = 0.05
    # smoothing / noise optimisation
    sigma0_grid: list[float] = field(default_factory=lambda: [0.12, 0.25, 0.5, 1.0])
    M: int = 50
    T_train: int = 1
    T_infer: int = 100
    J: int = 1
    alpha_lr: float = 1e-4
    alpha_conf: float = 0.001
    temperature: float = 1.0
    sigma_ceiling_factor: float = 4.0
    base_copies: int = 4
    # eval
    radius_grid: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75])
    baseline: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.poison_rate < 1:
            raise ConfigError(f"poison_rate must lie in (0, 1), got {self.poison_rate}")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.J < 1:
            raise ConfigError("J must be >= 1")
        if not 0 < self.alpha_conf < 1:
            raise ConfigError("alpha_conf must lie in (0, 1)")
        if not self.sigma0_grid or min(self.sigma0_grid) <= 0:
            raise ConfigError("sigma0_grid must be a non-empty list of positive values")
        if self.attack_mode not in ("all-to-one", "all-to-all"):
            raise ConfigError(f"unknown attack_mode {self.attack_mode!r}")
        if self.selection not in ("random", "map"):
            raise ConfigError(f"unknown selection {self.selection!r}")
        if self.T_train < 0 or self.T_infer < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.radius_grid != sorted(self.radius_grid):
            raise ConfigError("radius_grid must be ascending")

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        values = {}
        for section, keys in _SCHEMA.items():
            if not parser.has_section(section):
                raise ConfigError(f"missing config section [{section}]")
            for key, conv in keys.items():
                if not parser.has_option(section, key):
                    raise ConfigError(f"missing config key {section}.{key}")
                raw = parser.get(section, key)
                try:
                    values[key] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None
        return cls(**values)

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, list) and v and isinstance(v[0], list):
                return "; ".join(", ".join(repr(x) for x in row) for row in v)
            if isinstance(v, list):
                return ", ".join(repr(x) for x in v)
            return repr(v) if isinstance(v, float) else str(v)

        lines = []
        for section, keys in _SCHEMA.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {fmt(getattr(self, k))}" for k in keys]
            lines.append("")
        return "\n".join(lines)
