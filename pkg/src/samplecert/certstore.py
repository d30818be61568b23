"""Storage of certified regions with label-conflict resolution.

Regions are open l2 balls centred at the certified input. Two balls overlap
iff the distance between centres is strictly less than the sum of radii, so
touching balls do not conflict.

Inserting a new triplet scans the store in insertion order. For each stored
region with a different label that overlaps the new one:

* 3a, the new centre lies in the stored ball (``dist <= r_i``): adopt the
  stored label and shrink to ``min(r, r_i - dist)``, the largest centred ball
  inside the stored one;
* 3b, otherwise: shrink to ``min(r, dist - r_i)``, the largest centred ball
  disjoint from it.

Radii never grow and centres never move, so every stored region is a subset
of the region originally certified. Later comparisons use the label adopted
in 3a. Zero-radius triplets are kept.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, StoreError

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError("ball radius must be non-negative")


def _distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # one formula everywhere so insert and verify agree to the last bit
    return np.sqrt(np.sum((centers - x) ** 2, axis=-1))


def overlaps(a: Ball, b: Ball) -> bool:
    ca, cb = np.asarray(a.center, dtype=np.float64), np.asarray(b.center, dtype=np.float64)
    if ca.shape != cb.shape:
        raise ShapeError(f"dimension mismatch: {ca.shape} vs {cb.shape}")
    return float(_distances(ca, cb)) < a.radius + b.radius


@dataclass
class CertTriplet:
    input: np.ndarray
    label: int
    radius: float
    original_radius: float | None = None
    original_label: int | None = None
    conflicts: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=np.float64)
        if self.original_radius is None:
            self.original_radius = self.radius
        if self.original_label is None:
            self.original_label = self.label

    @property
    def region(self) -> Ball:
        return Ball(self.input, self.radius)


@dataclass(frozen=True)
class StoreReport:
    case_taken: str  # "1" | "2" | "3a" | "3b" | "multi"
    final_label: int
    final_radius: float
    shrink_events: tuple[dict, ...] = ()


def _shrink_to_disjoint(r_new: float, dist: float, r_other: float) -> float:
    r = max(0.0, min(r_new, dist - r_other))
    # rounding in dist - r_other can leave r + r_other a few ulps above dist
    while r > 0.0 and dist < r + r_other:
        r = math.nextafter(r, 0.0)
    return r


def _shrink_to_inside(r_new: float, dist: float, r_other: float) -> float:
    r = max(0.0, min(r_new, r_other - dist))
    while r > 0.0 and dist + r > r_other:
        r = math.nextafter(r, 0.0)
    return r


class CertStore:
    """Single-writer store; callers must serialise :meth:`insert` calls."""

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self.entries: list[CertTriplet] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def insert(self, new: CertTriplet) -> tuple[CertTriplet, StoreReport]:
        x = np.asarray(new.input, dtype=np.float64)
        if self.dim is None:
            self.dim = x.shape[0]
        elif x.shape != (self.dim,):
            raise ShapeError(f"input dimension {x.shape} does not match store dimension {self.dim}")
        label, radius = int(new.label), float(new.radius)
        events: list[dict] = []
        saw_same_label_overlap = False
        if self.entries:
            centers = np.stack([e.input for e in self.entries])
            dists = _distances(x, centers)
            radii = np.array([e.radius for e in self.entries])
            # radii only shrink, so this candidate set covers every later overlap
            candidates = np.flatnonzero(dists < radius + radii)
        else:
            dists = radii = np.zeros(0)
            candidates = np.zeros(0, dtype=np.int64)
        for i in candidates:
            old, dist = self.entries[i], float(dists[i])
            if not dist < radius + old.radius:
                continue
            if old.label == label:
                saw_same_label_overlap = True
                continue
            if dist <= old.radius:
                new_radius = _shrink_to_inside(radius, dist, old.radius)
                events.append({"case": "3a", "index": int(i), "from_label": label, "to_label": old.label,
                               "from_radius": radius, "to_radius": new_radius})
                label = old.label
            else:
                new_radius = _shrink_to_disjoint(radius, dist, old.radius)
                events.append({"case": "3b", "index": int(i), "label": label,
                               "from_radius": radius, "to_radius": new_radius})
            radius = new_radius

        if any(e["case"] == "3a" for e in events):
            # entries scanned before a relabel are disjoint in exact arithmetic;
            # re-check them so float rounding cannot leave a sliver of overlap
            for i in candidates:
                old, dist = self.entries[i], float(dists[i])
                if old.label != label and dist < radius + old.radius:
                    new_radius = _shrink_to_disjoint(radius, dist, old.radius)
                    events.append({"case": "3b", "index": int(i), "label": label,
                                   "from_radius": radius, "to_radius": new_radius})
                    radius = new_radius

        if len(events) > 1:
            case = "multi"
        elif events:
            case = events[0]["case"]
        else:
            case = "2" if saw_same_label_overlap else "1"
        final = CertTriplet(x.copy(), label, radius, float(new.original_radius),
                            int(new.original_label), list(events))
        self.entries.append(final)
        return final, StoreReport(case, label, radius, tuple(events))

    def verify(self) -> tuple[bool, list[tuple[int, int]]]:
        """Exhaustive pairwise check that differently labelled regions are disjoint."""
        bad = []
        if len(self.entries) > 1:
            centers = np.stack([e.input for e in self.entries])
            labels = np.array([e.label for e in self.entries])
            radii = np.array([e.radius for e in self.entries])
            for i in range(len(self.entries) - 1):
                d = _distances(centers[i], centers[i + 1:])
                hit = (labels[i + 1:] != labels[i]) & (d < radii[i] + radii[i + 1:])
                bad.extend((i, i + 1 + int(j)) for j in np.flatnonzero(hit))
        return not bad, bad

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "dim": self.dim,
            "entries": [
                {
                    "center": [float(v) for v in e.input],
                    "label": int(e.label),
                    "radius": float(e.radius),
                    "original_radius": float(e.original_radius),
                    "original_label": int(e.original_label),
                }
                for e in self.entries
            ],
        }

    def snapshot(self, path: str | Path) -> None:
        # json float repr round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "CertStore":
        if not isinstance(data, dict) or "version" not in data:
            raise StoreError("corrupt store snapshot")
        if data["version"] != SNAPSHOT_VERSION:
            raise StoreError(f"unsupported snapshot version {data['version']!r}")
        store = cls(data.get("dim"))
        try:
            for e in data["entries"]:
                store.entries.append(CertTriplet(np.array(e["center"], dtype=np.float64), int(e["label"]),
                                                 float(e["radius"]), float(e["original_radius"]),
                                                 int(e.get("original_label", e["label"]))))
        except (KeyError, TypeError, ValueError) as exc:
            raise StoreError(f"corrupt store snapshot: {exc}") from None
        return store

    @classmethod
    def restore(cls, path: str | Path) -> "CertStore":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise StoreError(f"corrupt store snapshot {path}: {exc}") from None
        return cls.from_dict(data)


def verify_store(store: CertStore) -> tuple[bool, list[tuple[int, int]]]:
    return store.verify()
