"""Certification metrics and curve emission.

A record counts toward ERA/CRA at threshold ``r`` when it did not abstain,
its certified label equals the record's true (pre-poisoning) label, and its
radius is at least ``r``. AER/ACR average the radius with abstaining or
wrong records contributing 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ParseError
from .smoothing import ABSTAIN

DEFAULT_RADIUS_GRID = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


@dataclass(frozen=True)
class CertRecord:
    index: int
    is_triggered: bool
    true_label: int
    certified_label: int  # ABSTAIN (-1) when abstaining
    radius: float
    sigma_used: float
    p_a_lower: float = float("nan")
    p_b_upper: float = float("nan")

    def __post_init__(self):
        if not self.radius >= 0:
            raise DomainError(f"record {self.index}: radius must be non-negative")

    @property
    def correct(self) -> bool:
        return self.certified_label != ABSTAIN and self.certified_label == self.true_label

    def to_json(self) -> str:
        d = {
            "index": self.index,
            "is_triggered": self.is_triggered,
            "true_label": self.true_label,
            "label": "ABSTAIN" if self.certified_label == ABSTAIN else self.certified_label,
            "radius": self.radius,
            "p_a_lower": self.p_a_lower,
            "p_b_upper": self.p_b_upper,
            "sigma": self.sigma_used,
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CertRecord":
        d = json.loads(line)
        label = ABSTAIN if d["label"] == "ABSTAIN" else int(d["label"])
        return cls(int(d["index"]), bool(d["is_triggered"]), int(d["true_label"]), label,
                   float(d["radius"]), float(d["sigma"]), float(d["p_a_lower"]), float(d["p_b_upper"]))


def write_records(records: Iterable[CertRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[CertRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(CertRecord.from_json(line))
                except (KeyError, ValueError) as exc:
                    raise ParseError(f"{path}:{lineno}: bad record ({exc})") from None
    return out


def _require(records: Sequence[CertRecord], triggered: bool | None, what: str) -> None:
    if not records:
        raise DomainError(f"{what} is undefined on an empty record set")
    if triggered is not None and any(r.is_triggered != triggered for r in records):
        kind = "triggered" if triggered else "clean"
        raise DomainError(f"{what} expects only {kind} records")


def _accuracy_at(records: Sequence[CertRecord], r: float) -> float:
    return sum(1 for rec in records if rec.correct and rec.radius >= r) / len(records)


def era_at(records: Sequence[CertRecord], r: float) -> float:
    _require(records, False, "ERA")
    return _accuracy_at(records, r)


def cra_at(records: Sequence[CertRecord], r: float) -> float:
    _require(records, True, "CRA")
    return _accuracy_at(records, r)


def _mean_radius(records: Sequence[CertRecord]) -> float:
    return float(np.mean([rec.radius if rec.correct else 0.0 for rec in records]))


def aer(records: Sequence[CertRecord]) -> float:
    _require(records, False, "AER")
    return _mean_radius(records)


def acr(records: Sequence[CertRecord]) -> float:
    _require(records, True, "ACR")
    return _mean_radius(records)


def abstain_rate(records: Sequence[CertRecord]) -> float:
    _require(records, None, "abstain rate")
    return sum(1 for r in records if r.certified_label == ABSTAIN) / len(records)


def split(records: Sequence[CertRecord]) -> tuple[list[CertRecord], list[CertRecord]]:
    clean = [r for r in records if not r.is_triggered]
    trig = [r for r in records if r.is_triggered]
    return clean, trig


@dataclass(frozen=True)
class CurvePoint:
    radius_threshold: float
    era: float
    cra: float


def certification_curve(records: Sequence[CertRecord], grid: Sequence[float] = DEFAULT_RADIUS_GRID
                        ) -> list[CurvePoint]:
    if list(grid) != sorted(grid):
        raise DomainError("radius grid must be ascending")
    clean, trig = split(records)
    nan = float("nan")
    return [CurvePoint(float(r), era_at(clean, r) if clean else nan, cra_at(trig, r) if trig else nan)
            for r in grid]


def _non_increasing(vals: Sequence[float]) -> bool:
    v = [x for x in vals if not np.isnan(x)]
    return all(b <= a for a, b in zip(v, v[1:]))


def emit_curves(points: Sequence[CurvePoint], path: str | Path, plot_data: str | Path | None = None) -> None:
    if not (_non_increasing([p.era for p in points]) and _non_increasing([p.cra for p in points])):
        raise DomainError("certification curves must be non-increasing in the radius")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["radius", "era", "cra"])
        for p in points:
            w.writerow([f"{p.radius_threshold:.4f}", f"{p.era:.6f}", f"{p.cra:.6f}"])
    if plot_data is not None:
        Path(plot_data).write_text(json.dumps({
            "radius": [p.radius_threshold for p in points],
            "era": [p.era for p in points],
            "cra": [p.cra for p in points],
        }, sort_keys=True) + "\n")


def best_over_runs(curves: Sequence[Sequence[CurvePoint]]) -> list[CurvePoint]:
    """Per-radius maximum across runs (e.g. over sigma0), as in a best-of table row."""
    if not curves:
        raise DomainError("no curves to merge")
    grids = {tuple(p.radius_threshold for p in c) for c in curves}
    if len(grids) != 1:
        raise DomainError("curves were computed on different radius grids")
    out = []
    for pts in zip(*curves):
        era = [p.era for p in pts if not np.isnan(p.era)]
        cra = [p.cra for p in pts if not np.isnan(p.cra)]
        out.append(CurvePoint(pts[0].radius_threshold, max(era) if era else float("nan"),
                              max(cra) if cra else float("nan")))
    return out


def summary(records: Sequence[CertRecord], grid: Sequence[float] = DEFAULT_RADIUS_GRID) -> dict:
    clean, trig = split(records)
    out = {
        "n_clean": len(clean),
        "n_triggered": len(trig),
        "abstain_rate": abstain_rate(records),
        "curve": [asdict(p) for p in certification_curve(records, grid)],
    }
    if clean:
        out["aer"] = aer(clean)
        out["abstain_rate_clean"] = abstain_rate(clean)
    if trig:
        out["acr"] = acr(trig)
        out["abstain_rate_triggered"] = abstain_rate(trig)
    return out
