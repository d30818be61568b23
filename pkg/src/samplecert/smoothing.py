"""Monte Carlo smoothing, certified radius, and exact binomial bounds."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import bdtr, bdtrc, ndtr

from . import rng
from .classifiers import Classifier, predict
from .errors import DomainError

ABSTAIN = -1
CLIP_EPS = 1e-12
MC_CHUNK = 4096

# Wichura (1988), algorithm AS 241 (PPND16); coefficients in ascending powers.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _poly(coef, r):
    out = np.zeros_like(r)
    for c in reversed(coef):
        out = out * r + c
    return out


def norm_ppf(p):
    """Inverse standard normal CDF on (0, 1).

    AS 241 rational approximation followed by one Newton step on the CDF.
    Returns a float for scalar input, an array otherwise.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr <= 0) | (p_arr >= 1)):
        raise DomainError("norm_ppf needs probabilities strictly inside (0, 1)")
    p1 = np.atleast_1d(p_arr)
    q = p1 - 0.5
    x = np.empty_like(p1)

    central = np.abs(q) <= 0.425
    r = 0.180625 - q[central] ** 2
    x[central] = q[central] * _poly(_A, r) / _poly(_B, r)

    tail = ~central
    r = np.sqrt(-np.log(np.minimum(p1[tail], 1.0 - p1[tail])))
    xt = np.where(r <= 5.0, _poly(_C, r - 1.6) / _poly(_D, r - 1.6),
                  _poly(_E, r - 5.0) / _poly(_F, r - 5.0))
    x[tail] = np.where(q[tail] < 0, -xt, xt)

    # Newton refinement; the upper half uses the complement to avoid cancellation
    err = np.where(p1 < 0.5, ndtr(x) - p1, (1.0 - p1) - ndtr(-x))
    x = x - err * np.sqrt(2 * np.pi) * np.exp(0.5 * x * x)
    return float(x[0]) if p_arr.ndim == 0 else x.reshape(p_arr.shape)


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / np.sqrt(2 * np.pi)


def certified_radius(p_a, p_b, sigma):
    """sigma/2 * (ppf(p_a) - ppf(p_b)) after clipping both to [1e-12, 1 - 1e-12].

    Negative when p_a < p_b; deciding to abstain is the caller's job.
    """
    if np.any(np.asarray(sigma) <= 0):
        raise DomainError("sigma must be positive")
    pa = np.clip(p_a, CLIP_EPS, 1 - CLIP_EPS)
    pb = np.clip(p_b, CLIP_EPS, 1 - CLIP_EPS)
    r = 0.5 * np.asarray(sigma) * (norm_ppf(pa) - norm_ppf(pb))
    return float(r) if np.ndim(r) == 0 else r


# ---------------------------------------------------------- binomial bounds

_BISECT_STEPS = 50  # interval width 2**-50 < 1e-15


def _check_kn(k: int, n: int, alpha: float) -> None:
    if n < 1 or not 0 <= k <= n:
        raise DomainError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")


def binom_lower_bound(k: int, n: int, alpha: float) -> float:
    """One-sided Clopper-Pearson lower bound: solves P[Bin(n, L) >= k] = alpha."""
    _check_kn(k, n, alpha)
    if k == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        if bdtrc(k - 1, n, mid) < alpha:  # P[X >= k] increases with p
            lo = mid
        else:
            hi = mid
    return lo


def binom_upper_bound(k: int, n: int, alpha: float) -> float:
    """One-sided Clopper-Pearson upper bound: solves P[Bin(n, U) <= k] = alpha."""
    _check_kn(k, n, alpha)
    if k == n:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        if bdtr(k, n, mid) > alpha:  # P[X <= k] decreases with p
            lo = mid
        else:
            hi = mid
    return hi


# ------------------------------------------------------------- certification


@dataclass(frozen=True)
class VoteCounts:
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def top_two(self) -> tuple[int, int]:
        c = np.asarray(self.counts)
        order = np.lexsort((np.arange(c.size), -c))
        return int(order[0]), int(order[1]) if c.size > 1 else int(order[0])


@dataclass(frozen=True)
class ConfidenceBounds:
    p_a_lower: float
    p_b_upper: float
    alpha: float
    y_a: int
    y_b: int


@dataclass(frozen=True)
class CertificationResult:
    label: int
    radius: float
    bounds: ConfidenceBounds
    sigma_used: float

    @property
    def abstained(self) -> bool:
        return self.label == ABSTAIN

    def to_dict(self) -> dict:
        return {"label": self.label, "radius": self.radius, "sigma": self.sigma_used,
                **asdict(self.bounds)}


def certify_counts(votes: VoteCounts, sigma: float, alpha: float) -> CertificationResult:
    """Top-two bounds on vote counts; abstain iff P_A <= P_B."""
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    y_a, y_b = votes.top_two()
    n = votes.total
    pa = binom_lower_bound(votes.counts[y_a], n, alpha)
    pb = binom_upper_bound(votes.counts[y_b], n, alpha)
    bounds = ConfidenceBounds(pa, pb, alpha, y_a, y_b)
    if pa <= pb:
        return CertificationResult(ABSTAIN, 0.0, bounds, sigma)
    return CertificationResult(y_a, certified_radius(pa, pb, sigma), bounds, sigma)


def _chunk_counts(model: Classifier, x: np.ndarray, sigma: float, size: int, seed: int,
                  chunk: int) -> np.ndarray:
    z = rng.stream(seed, "mc", chunk).standard_normal((size, x.shape[0]))
    return np.bincount(predict(model, x + sigma * z), minlength=model.num_classes)


def mc_class_probabilities(model: Classifier, x, sigma: float, n_samples: int, seed: int,
                           workers: int = 1) -> VoteCounts:
    """Hard-prediction counts over ``n_samples`` draws of x + sigma * z.

    Draws are split into fixed chunks of ``MC_CHUNK``; chunk ``i`` reads the
    sub-stream ``(seed, "mc", i)``. Integer counts are summed, so any number
    of workers gives bit-identical results.
    """
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    sizes = [MC_CHUNK] * (n_samples // MC_CHUNK)
    if n_samples % MC_CHUNK:
        sizes.append(n_samples % MC_CHUNK)
    jobs = list(enumerate(sizes))
    run = lambda job: _chunk_counts(model, x, sigma, job[1], seed, job[0])  # noqa: E731
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    total = np.sum(parts, axis=0) if parts else np.zeros(model.num_classes, dtype=np.int64)
    return VoteCounts(tuple(int(c) for c in total))


def certify_single(model: Classifier, x, sigma: float, n_samples: int, alpha: float,
                   seed: int) -> CertificationResult:
    votes = mc_class_probabilities(model, x, sigma, n_samples, seed)
    return certify_counts(votes, sigma, alpha)
