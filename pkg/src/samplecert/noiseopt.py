"""Per-sample noise scale by stochastic gradient ascent on a radius surrogate.

The surrogate replaces hard vote frequencies with mean softmax scores over
reparameterised draws ``x + sigma * z``, ``z ~ N(0, I)``:

    F(sigma)   = mean_j softmax(f(x + sigma z_j) / temperature)
    r(sigma)   = sigma / 2 * (ppf(F_A) - ppf(F_B))

with A the top class of F and B the runner-up. Because ``z`` does not
depend on sigma, dF/dsigma = mean_j J_softmax(x + sigma z_j) . z_j and the
gradient of r follows by the chain rule (pathwise estimator). Only the
test-input noise is differentiated; training-set noise is baked into the
ensemble members.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import betaincinv

from . import rng
from .classifiers import Classifier, StackedClassifier
from .datamodel import SIGMA_FLOOR, Dataset, NoiseAssignment
from .errors import DomainError
from .parallel import pmap
from .smoothing import norm_pdf, norm_ppf

log = logging.getLogger(__name__)

Target = Union[Classifier, Sequence[Classifier], StackedClassifier]


@dataclass(frozen=True)
class SgaConfig:
    iters: int = 100
    mc_per_step: int = 1
    learning_rate: float = 1e-4
    sigma_init: float = 0.5
    sigma_floor: float = SIGMA_FLOOR
    sigma_ceiling: float | None = None  # None -> 4 * sigma_init
    clamp_eps: float = 1e-12
    temperature: float = 1.0
    # when set, the radius is computed from Clopper-Pearson bounds on
    # vote_count * F expected votes instead of from F itself
    vote_count: int | None = None
    vote_alpha: float = 0.001

    @property
    def ceiling(self) -> float:
        return 4.0 * self.sigma_init if self.sigma_ceiling is None else self.sigma_ceiling

    def __post_init__(self):
        if not self.sigma_floor < self.sigma_init <= self.ceiling:
            raise DomainError("need sigma_floor < sigma_init <= sigma_ceiling")
        if self.iters < 0 or self.mc_per_step < 1:
            raise DomainError("iters must be >= 0 and mc_per_step >= 1")


def _stack(target: Target) -> StackedClassifier:
    if isinstance(target, StackedClassifier):
        return target
    if isinstance(target, Classifier):
        return StackedClassifier([target])
    models = getattr(target, "models", target)
    return StackedClassifier(list(models))


def draw_noise(target: Target, J: int, seed: int) -> np.ndarray:
    st = _stack(target)
    return rng.stream(seed, "sga-noise").standard_normal((st.size, J, st.dim))


def soft_scores(target: Target, x, sigma: float, zhat: np.ndarray, temperature: float = 1.0):
    """F (K,) and dF/dsigma (K,) for fixed standard-normal draws ``zhat`` (M, J, d)."""
    st = _stack(target)
    x = np.asarray(x, dtype=np.float64)
    z, Jac = st.logits_and_jacobian(x + sigma * zhat)
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    S = np.exp(z)
    S /= S.sum(axis=-1, keepdims=True)
    # d softmax_k / dx = S_k (grad z_k - sum_j S_j grad z_j) / T
    mean_grad = np.einsum("mnk,mnkd->mnd", S, Jac)
    dS = S[..., None] * (Jac - mean_grad[:, :, None, :]) / temperature
    dS_dsigma = np.einsum("mnkd,mnd->mnk", dS, zhat)
    K = st.num_classes
    return S.reshape(-1, K).mean(axis=0), dS_dsigma.reshape(-1, K).mean(axis=0)


def soft_class_frequencies(target: Target, x, sigma: float, J: int, seed: int,
                           temperature: float = 1.0) -> np.ndarray:
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    return soft_scores(target, x, sigma, draw_noise(target, J, seed), temperature)[0]


def top_two(F: np.ndarray) -> tuple[int, int]:
    order = np.lexsort((np.arange(F.size), -F))
    return int(order[0]), int(order[1])


def vote_bounds(fa: float, fb: float, M: int, alpha: float) -> tuple[float, float]:
    """Clopper-Pearson bounds for fractional vote counts M*fa, M*fb.

    The exact bounds are beta quantiles, which stay smooth when the count is
    not an integer; at integer counts they equal the binomial bounds.
    """
    ka = min(max(M * fa, 1e-9), M)
    kb = min(max(M * fb, 0.0), M - 1e-9)
    lo = float(betaincinv(ka, M - ka + 1, alpha))
    hi = float(betaincinv(kb + 1, M - kb, 1 - alpha))
    return lo, hi


def _clipped_ppf(p: float, upper_tail: float, eps: float) -> float:
    """Phi^-1(p) clipped to [eps, 1 - eps]; above 1/2 the quantile is taken
    from ``upper_tail`` = 1 - p, which callers compute without cancellation."""
    if p <= 0.5:
        return float(norm_ppf(min(max(p, eps), 1 - eps)))
    return -float(norm_ppf(min(max(upper_tail, eps), 1 - eps)))


def _quantile_terms(F: np.ndarray, a: int, b: int, eps: float, M: int | None, alpha: float):
    """((q_a, dq_a/dF_a), (q_b, dq_b/dF_b)) for the top two classes."""
    fa, fb = float(F[a]), float(F[b])
    if M is None:
        # the other classes' mass is the upper tail of F_a at full relative precision
        tail_a = float(np.sum(np.delete(F, a)))
        qa = _clipped_ppf(fa, tail_a, eps)
        qb = _clipped_ppf(fb, 1.0 - fb, eps)
        # clipping is flat outside [eps, 1 - eps]
        da = 1.0 / float(norm_pdf(qa)) if eps <= fa <= 1 - eps else 0.0
        db = 1.0 / float(norm_pdf(qb)) if eps <= fb <= 1 - eps else 0.0
        return (qa, da), (qb, db)

    def q_lower(f):
        lo, _ = vote_bounds(f, 0.0, M, alpha)
        return _clipped_ppf(lo, 1.0 - lo, eps)

    def q_upper(f):
        _, hi = vote_bounds(1.0, f, M, alpha)
        return _clipped_ppf(hi, 1.0 - hi, eps)

    def slope(q, f):
        lo, hi = max(f - 1e-6, 0.0), min(f + 1e-6, 1.0)
        return (q(hi) - q(lo)) / (hi - lo)

    return (q_lower(fa), slope(q_lower, fa)), (q_upper(fb), slope(q_upper, fb))


def surrogate_radius(F: np.ndarray, sigma: float, eps: float = 1e-12, vote_count: int | None = None,
                     vote_alpha: float = 0.001) -> float:
    a, b = top_two(F)
    (qa, _), (qb, _) = _quantile_terms(F, a, b, eps, vote_count, vote_alpha)
    return 0.5 * sigma * (qa - qb)


def radius_and_gradient(F: np.ndarray, dF: np.ndarray, sigma: float, eps: float = 1e-12,
                        vote_count: int | None = None, vote_alpha: float = 0.001) -> tuple[float, float]:
    """Surrogate radius and its total derivative in sigma."""
    a, b = top_two(F)
    (qa, da), (qb, db) = _quantile_terms(F, a, b, eps, vote_count, vote_alpha)
    sa, sb = da * float(dF[a]), db * float(dF[b])
    return 0.5 * sigma * (qa - qb), 0.5 * (qa - qb) + 0.5 * sigma * (sa - sb)


def pathwise_gradient(target: Target, x, sigma: float, zhat: np.ndarray, cfg: SgaConfig) -> float:
    F, dF = soft_scores(target, x, sigma, zhat, cfg.temperature)
    return radius_and_gradient(F, dF, sigma, cfg.clamp_eps, cfg.vote_count, cfg.vote_alpha)[1]


def sga_step(target: Target, x, sigma_t: float, cfg: SgaConfig, seed_t: int) -> float:
    """sigma + lr * grad, clipped to [floor, ceiling]; draws fixed within the step."""
    zhat = draw_noise(target, cfg.mc_per_step, seed_t)
    g = pathwise_gradient(target, x, sigma_t, zhat, cfg)
    if not np.isfinite(g):
        log.warning("non-finite sigma gradient at sigma=%g; step skipped", sigma_t)
        return sigma_t
    return float(np.clip(sigma_t + cfg.learning_rate * g, cfg.sigma_floor, cfg.ceiling))


def optimize_sigma(target: Target, x, cfg: SgaConfig, seed: int) -> float:
    """``cfg.iters`` SGA steps from ``sigma_init``; returns the final iterate."""
    st = _stack(target)
    sigma = cfg.sigma_init
    for t in range(cfg.iters):
        sigma = sga_step(st, x, sigma, cfg, rng.derive(seed, "sga", t))
    return sigma


def sample_seed(seed: int, x) -> int:
    """Seed keyed on the sample's bytes, so identical inputs share a stream."""
    key = rng.hash64(np.ascontiguousarray(x, dtype="<f8").tobytes())
    return rng.derive(seed, "sample", key)


def optimize_points(target: Target, X: np.ndarray, cfg: SgaConfig, seed: int,
                    workers: int = 1) -> np.ndarray:
    st = _stack(target)

    def one(x):
        try:
            return optimize_sigma(st, x, cfg, sample_seed(seed, x))
        except Exception as exc:  # per-sample failure falls back to sigma0
            log.warning("sigma optimisation failed (%s); using sigma0", exc)
            return cfg.sigma_init

    return np.array(pmap(one, list(np.asarray(X, dtype=np.float64)), workers))


def optimize_all(target: Target, ds: Dataset, cfg: SgaConfig, seed: int,
                 workers: int = 1) -> NoiseAssignment:
    sig = optimize_points(target, ds.X, cfg, seed, workers)
    return NoiseAssignment({i: float(s) for i, s in enumerate(sig)}, cfg.sigma_init, cfg.sigma_floor)
