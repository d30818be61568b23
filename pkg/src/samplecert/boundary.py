"""Closest decision-boundary samples and boundary-distance histograms.

The search keeps every iterate on the boundary ``phi_y = 0``:

1. Bracket: pick a pool point ``x0`` on the other side (``phi_y(x0) <= 0``)
   and bisect the segment ``[x, x0]`` for the first boundary iterate.
2. Step: linearise ``phi_y`` at the iterate, take the closest point to ``x``
   on that hyperplane, push it a further ``alpha_t`` along ``-grad/|grad|``
   so it lies on the far side, and bisect back to the boundary on the
   segment between ``x`` and that point. ``alpha_t = c / sqrt(t + 1)`` with
   ``c = step_scale * |x - x0|``.

On a linear model step 2 lands on the orthogonal projection of ``x`` in a
single iteration. The reported point is the closest iterate seen.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .classifiers import Classifier, margin_gradient, margins
from .datamodel import Dataset
from .errors import DomainError, SearchFailure

_BISECT_STEPS = 80


@dataclass(frozen=True)
class BoundarySearchConfig:
    init_pool: np.ndarray
    max_iters: int = 50
    step_scale: float = 0.1
    tol: float = 1e-6
    max_overshoot_doublings: int = 20

    def __post_init__(self):
        if not self.tol > 0:
            raise DomainError("tol must be positive")
        if np.asarray(self.init_pool).size == 0:
            raise DomainError("initial-point pool is empty")


@dataclass(frozen=True)
class BoundaryResult:
    boundary_point: np.ndarray
    distance: float
    residual_margin: float
    iterations_used: int
    converged: bool


def _phi(model: Classifier, u: np.ndarray, y: int) -> float:
    return float(margins(model, u[None, :], [y])[0])


def _bisect(model, y, sign, inside, outside) -> np.ndarray:
    """Point on [inside, outside] where sign * phi crosses zero (inside > 0 >= outside)."""
    lo, hi = 0.0, 1.0
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        v = sign * _phi(model, inside + mid * (outside - inside), y)
        if v == 0.0:
            return inside + mid * (outside - inside)
        if v > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-17:
            break
    # the endpoint on the non-positive side keeps the iterate across the boundary
    return inside + hi * (outside - inside)


def closest_boundary_sample(model: Classifier, x, y: int, cfg: BoundarySearchConfig,
                            seed: int = 0) -> BoundaryResult:
    x = np.asarray(x, dtype=np.float64)
    phi_x = _phi(model, x, y)
    if phi_x == 0.0:
        return BoundaryResult(x.copy(), 0.0, 0.0, 0, True)
    sign = 1.0 if phi_x > 0 else -1.0

    pool = np.atleast_2d(np.asarray(cfg.init_pool, dtype=np.float64))
    order = rng.stream(seed, "boundary-pool").permutation(pool.shape[0])
    x0 = next((pool[i] for i in order if sign * _phi(model, pool[i], y) <= 0), None)
    if x0 is None:
        raise SearchFailure("no pool point lies on the other side of the boundary")

    current = _bisect(model, y, sign, x, x0)
    best = current
    best_d = float(np.linalg.norm(current - x))
    c = cfg.step_scale * float(np.linalg.norm(x - x0))
    iters = 0
    for t in range(cfg.max_iters):
        iters = t + 1
        val, g = margin_gradient(model, current, y)
        val, g = sign * val, sign * g
        gn = float(np.linalg.norm(g))
        if gn == 0.0:
            break
        unit = g / gn
        proj = x - (val + g @ (x - current)) / gn**2 * g
        step = c / np.sqrt(t + 1)
        anchor = None
        for _ in range(cfg.max_overshoot_doublings):
            cand = proj - step * unit
            if sign * _phi(model, cand, y) <= 0:
                anchor = cand
                break
            step *= 2.0
        if anchor is None:
            break
        nxt = _bisect(model, y, sign, x, anchor)
        d = float(np.linalg.norm(nxt - x))
        moved = float(np.linalg.norm(nxt - current))
        current = nxt
        if d < best_d:
            best, best_d = nxt, d
        if moved <= 1e-13 * (1.0 + float(np.linalg.norm(x))):
            break
    resid = abs(_phi(model, best, y))
    return BoundaryResult(best, best_d, resid, iters, resid <= cfg.tol)


@dataclass
class DistanceHistogram:
    distances: np.ndarray  # NaN where the search failed
    converged: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    failures: list[tuple[int, str]] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "distance", "converged"])
            for i, (d, ok) in enumerate(zip(self.distances, self.converged)):
                w.writerow([i, "nan" if np.isnan(d) else f"{d:.10f}", int(ok)])

    def bins_to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([f"{lo:.10f}", f"{hi:.10f}", int(c)])


def boundary_distance_histogram(model: Classifier, samples: Dataset, y,
                                cfg: BoundarySearchConfig, bins: int = 20,
                                seed: int = 0) -> DistanceHistogram:
    """Boundary distances for every sample; failures are recorded, not raised.

    ``y`` is one class for all samples or one class per sample.
    """
    ys = np.broadcast_to(np.asarray(y, dtype=np.int64), (samples.n,))
    dist = np.full(samples.n, np.nan)
    conv = np.zeros(samples.n, bool)
    failures = []
    for i in range(samples.n):
        try:
            res = closest_boundary_sample(model, samples.X[i], int(ys[i]), cfg, rng.derive(seed, "sample", i))
        except SearchFailure as exc:
            failures.append((i, str(exc)))
            continue
        dist[i], conv[i] = res.distance, res.converged
    ok = dist[~np.isnan(dist)]
    if ok.size == 0:
        return DistanceHistogram(dist, conv, np.zeros(0, int), np.zeros(0), failures)
    counts, edges = np.histogram(ok, bins=bins)
    return DistanceHistogram(dist, conv, counts, edges, failures)
