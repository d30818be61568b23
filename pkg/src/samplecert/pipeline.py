"""Stage functions and the end-to-end pipeline.

Each stage is a plain function over in-memory objects plus a writer for its
artifact; the CLI subcommands and :func:`run_pipeline` share both, so a
stage re-run from the CLI writes the same bytes as the pipeline does.

Seeds are derived from the run seed by name, never from call order:

    data/train, data/test, trigger, poison, map-ref,
    sigma0/<value>/{base, sga-train, sga-test, ensemble}
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from .certstore import CertStore, CertTriplet
from .classifiers import Classifier, TrainConfig, train_classifier
from .datamodel import Dataset, NoiseAssignment, RunConfig, make_synthetic_gaussians, save_dataset
from .ensemble import SmoothedEnsemble, certify_ensemble, save_ensemble, train_ensemble
from .errors import SampleCertError, StageError
from .metrics import (CertRecord, CurvePoint, best_over_runs, certification_curve, emit_curves,
                      summary, write_records)
from .noiseopt import SgaConfig, draw_noise, optimize_points, soft_scores, surrogate_radius
from .parallel import pmap
from .poisoning import (LabelGenerator, TriggerSpec, apply_test_trigger, map_select_poison,
                        map_select_vulnerable, poison_dataset, poisoned_count)
from .smoothing import CertificationResult

log = logging.getLogger(__name__)

RADIUS_EVAL_DRAWS = 64


# ------------------------------------------------------------------ stages


def gen_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    means = np.asarray(cfg.means, dtype=np.float64)
    train = make_synthetic_gaussians(cfg.n_per_class, means, cfg.std, rng.derive(cfg.seed, "data", "train"))
    test = make_synthetic_gaussians(cfg.n_test_per_class, means, cfg.std, rng.derive(cfg.seed, "data", "test"))
    return train, test


def trigger_spec(cfg: RunConfig) -> TriggerSpec:
    return TriggerSpec(cfg.kind, cfg.trigger_budget, None, rng.derive(cfg.seed, "trigger"))


def model_config(cfg: RunConfig, seed: int) -> TrainConfig:
    return TrainConfig("mlp", (cfg.hidden,), cfg.train_steps, cfg.train_lr, 1e-4, seed)


def poison(cfg: RunConfig, train: Dataset, test: Dataset) -> tuple[Dataset, dict]:
    """Poisoned training set plus a manifest of the poisoned indices and deltas."""
    spec = trigger_spec(cfg)
    gen = LabelGenerator(cfg.attack_mode, cfg.target_label)
    if cfg.selection == "map":
        # the adaptive attacker scores test margins with its own clean model
        ref, _ = train_classifier(train, model_config(cfg, rng.derive(cfg.seed, "map-ref")))
        vulnerable = map_select_vulnerable(ref, test, cfg.k_vulnerable)
        selection = map_select_poison(train, test.X[vulnerable], cfg.target_label,
                                      poisoned_count(train.n, cfg.poison_rate))
    else:
        vulnerable = None
        selection = "random"
    poisoned = poison_dataset(train, spec, gen, cfg.poison_rate, selection, rng.derive(cfg.seed, "poison"))
    idx = np.flatnonzero(poisoned.poisoned)
    manifest = {
        "kind": spec.kind,
        "budget": spec.budget,
        "attack_mode": gen.mode,
        "target_label": gen.target,
        "selection": cfg.selection,
        "indices": [int(i) for i in idx],
        "deltas": [[float(v) for v in poisoned.deltas[i]] for i in idx],
        "total_norm": float(np.sqrt(np.sum(poisoned.deltas**2))),
    }
    if vulnerable is not None:
        manifest["vulnerable_test_indices"] = [int(i) for i in vulnerable]
    return poisoned, manifest


def triggered_test_set(cfg: RunConfig, test: Dataset) -> tuple[Dataset, np.ndarray]:
    """Test inputs plus trigger, keeping original labels.

    Under all-to-one the target class is skipped: a triggered target-class
    input has nothing to misclassify towards. Returns the set and the test
    indices it came from.
    """
    keep = np.arange(test.n)
    if cfg.attack_mode == "all-to-one":
        keep = np.flatnonzero(test.y != cfg.target_label)
    sub = test.subset(keep)
    return sub.with_features(apply_test_trigger(sub.X, trigger_spec(cfg))), keep


def train_base(cfg: RunConfig, poisoned: Dataset, sigma0: float, seed: int) -> Classifier:
    """One model on ``base_copies`` sigma0-perturbed copies of the training set.

    It stands in for the smoothed classifier when optimising the noise of
    training samples, before any ensemble exists.
    """
    copies = max(cfg.base_copies, 1)
    noise = rng.stream(seed, "copies").standard_normal((copies, poisoned.n, poisoned.dim))
    X = np.concatenate([poisoned.X + sigma0 * noise[c] for c in range(copies)])
    y = np.tile(poisoned.y, copies)
    model, _ = train_classifier(Dataset(X, y, poisoned.num_classes), model_config(cfg, rng.derive(seed, "init")))
    return model


@dataclass(frozen=True)
class NoiseReport:
    sigma_star: np.ndarray
    sigma0: float
    radius_before: np.ndarray
    radius_after: np.ndarray

    def assignment(self) -> NoiseAssignment:
        return NoiseAssignment({i: float(s) for i, s in enumerate(self.sigma_star)}, self.sigma0)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "sigma_star", "sigma0", "radius_before", "radius_after"])
            for i, (s, rb, ra) in enumerate(zip(self.sigma_star, self.radius_before, self.radius_after)):
                w.writerow([i, repr(float(s)), repr(self.sigma0), repr(float(rb)), repr(float(ra))])


def read_sigma_csv(path: str | Path) -> tuple[np.ndarray, float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SampleCertError(f"{path}: no sigma rows")
    sig = np.array([float(r["sigma_star"]) for r in rows])
    return sig, float(rows[0]["sigma0"])


def sga_config(cfg: RunConfig, sigma0: float, iters: int) -> SgaConfig:
    return SgaConfig(iters=iters, mc_per_step=cfg.J, learning_rate=cfg.alpha_lr, sigma_init=sigma0,
                     sigma_ceiling=cfg.sigma_ceiling_factor * sigma0,
                     temperature=cfg.temperature, vote_count=cfg.M, vote_alpha=cfg.alpha_conf)


def surrogate_radii(target, X: np.ndarray, sigmas: np.ndarray, seed: int, scfg: SgaConfig) -> np.ndarray:
    """Soft-score radius with common random draws across sigma values."""
    zhat = draw_noise(target, RADIUS_EVAL_DRAWS, rng.derive(seed, "radius-eval"))
    out = np.empty(len(X))
    for i, (x, s) in enumerate(zip(X, sigmas)):
        F, _ = soft_scores(target, x, float(s), zhat, scfg.temperature)
        out[i] = surrogate_radius(F, float(s), scfg.clamp_eps, scfg.vote_count, scfg.vote_alpha)
    return out


def optimize_noise(target, X: np.ndarray, cfg: RunConfig, sigma0: float, iters: int, seed: int,
                   workers: int = 1) -> NoiseReport:
    scfg = sga_config(cfg, sigma0, iters)
    sig = optimize_points(target, X, scfg, seed, workers)
    before = surrogate_radii(target, X, np.full(len(X), sigma0), seed, scfg)
    after = surrogate_radii(target, X, sig, seed, scfg)
    return NoiseReport(sig, sigma0, before, after)


def certify_inputs(ens: SmoothedEnsemble, X: np.ndarray, sigmas: np.ndarray, alpha: float,
                   workers: int = 1) -> list[CertificationResult]:
    jobs = list(zip(np.asarray(X, dtype=np.float64), np.asarray(sigmas, dtype=np.float64)))
    return pmap(lambda job: certify_ensemble(ens, job[0], float(job[1]), alpha), jobs, workers)


def to_records(results: Sequence[CertificationResult], indices, true_labels, triggered: bool) -> list[CertRecord]:
    return [CertRecord(int(i), triggered, int(y), int(r.label), float(r.radius), float(r.sigma_used),
                       float(r.bounds.p_a_lower), float(r.bounds.p_b_upper))
            for r, i, y in zip(results, indices, true_labels)]


def store_update(store: CertStore, X: np.ndarray, records: Sequence[CertRecord]) -> list[CertRecord]:
    """Sequential insert in the given order; returned records carry post-store labels and radii."""
    out = []
    for x, rec in zip(X, records):
        if rec.certified_label < 0:
            out.append(rec)  # abstentions certify no region
            continue
        final, _ = store.insert(CertTriplet(x, rec.certified_label, rec.radius))
        out.append(CertRecord(rec.index, rec.is_triggered, rec.true_label, final.label, final.radius,
                              rec.sigma_used, rec.p_a_lower, rec.p_b_upper))
    return out


# ------------------------------------------------------------------ artifacts


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, extra: dict) -> Path:
    top = out_dir / "manifest.json"
    files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p != top)
    manifest = {"artifacts": {str(p.relative_to(out_dir)): file_digest(p) for p in files}, **extra}
    path = out_dir / "manifest.json"
    write_json(manifest, path)
    return path


def _curve_rows(points: Sequence[CurvePoint]) -> list[dict]:
    return [{"radius": p.radius_threshold, "era": p.era, "cra": p.cra} for p in points]


def _stage(name: str):
    def wrap(fn):
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
            finally:
                log.info("stage %s: %.2fs", name, time.perf_counter() - t0)
        return run
    return wrap


@dataclass
class RunResult:
    out_dir: Path
    per_sigma: dict[float, dict]
    best_curve: list[CurvePoint]


def _certify_and_store(cfg, ens, test, trig, trig_idx, sig_clean, sig_trig, workers, use_store):
    res_c = _stage("certify")(certify_inputs)(ens, test.X, sig_clean, cfg.alpha_conf, workers)
    res_t = _stage("certify")(certify_inputs)(ens, trig.X, sig_trig, cfg.alpha_conf, workers)
    records = to_records(res_c, range(test.n), test.y, False) + to_records(res_t, trig_idx, trig.y, True)
    if not use_store:
        return records, None
    store = CertStore(test.dim)
    X_all = np.concatenate([test.X, trig.X])
    return _stage("store-insert")(store_update)(store, X_all, records), store


def _write_eval(run_dir: Path, records: list[CertRecord], grid) -> dict:
    write_records(records, run_dir / "records.jsonl")
    s = summary(records, grid)
    emit_curves(certification_curve(records, grid), run_dir / "curves.csv")
    write_json(s, run_dir / "metrics.json")
    return s


def run_sigma0(cfg: RunConfig, sigma0: float, poisoned: Dataset, test: Dataset, trig: Dataset,
               trig_idx: np.ndarray, run_dir: Path, workers: int = 1) -> dict:
    """Optimised-noise run (and optional fixed-noise baseline) for one sigma0."""
    run_dir.mkdir(parents=True, exist_ok=True)
    seed = rng.derive(cfg.seed, "sigma0", repr(float(sigma0)))
    base = _stage("train")(train_base)(cfg, poisoned, sigma0, rng.derive(seed, "base"))
    report = _stage("optimize-noise")(optimize_noise)(base, poisoned.X, cfg, sigma0, cfg.T_train,
                                                      rng.derive(seed, "sga-train"), workers)
    report.to_csv(run_dir / "noise_train.csv")

    mcfg = model_config(cfg, 0)
    ens_seed = rng.derive(seed, "ensemble")
    ens = _stage("train")(train_ensemble)(poisoned, report.assignment(), cfg.M, mcfg, ens_seed, workers)
    save_ensemble(ens, run_dir / "ensemble", {"sigma_map": "noise_train.csv", "sigma0": sigma0})

    X_eval = np.concatenate([test.X, trig.X])
    test_report = _stage("optimize-noise")(optimize_noise)(ens, X_eval, cfg, sigma0, cfg.T_infer,
                                                           rng.derive(seed, "sga-test"), workers)
    test_report.to_csv(run_dir / "noise_test.csv")
    sig = test_report.sigma_star
    records, store = _certify_and_store(cfg, ens, test, trig, trig_idx, sig[: test.n], sig[test.n:],
                                        workers, use_store=True)
    store.snapshot(run_dir / "store.json")
    ok, bad = store.verify()
    if not ok:
        raise StageError("store-insert", f"store invariant violated by pairs {bad[:5]}")
    result = {"optimized": _write_eval(run_dir, records, cfg.radius_grid)}

    if cfg.baseline:
        bdir = run_dir / "baseline"
        bdir.mkdir(exist_ok=True)
        b_ens = _stage("train")(train_ensemble)(poisoned, NoiseAssignment.constant(sigma0), cfg.M, mcfg,
                                                ens_seed, workers)
        save_ensemble(b_ens, bdir / "ensemble", {"sigma0": sigma0})
        b_records, _ = _certify_and_store(cfg, b_ens, test, trig, trig_idx, np.full(test.n, sigma0),
                                          np.full(trig.n, sigma0), workers, use_store=False)
        result["baseline"] = _write_eval(bdir, b_records, cfg.radius_grid)
    return result


def run_pipeline(cfg: RunConfig, out_dir: str | Path, workers: int = 1) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())

    train, test = _stage("gen-data")(gen_data)(cfg)
    (out / "data").mkdir(exist_ok=True)
    save_dataset(train, out / "data" / "train.csv")
    save_dataset(test, out / "data" / "test.csv")

    poisoned, pmanifest = _stage("poison")(poison)(cfg, train, test)
    (out / "poison").mkdir(exist_ok=True)
    save_dataset(poisoned, out / "poison" / "train_poisoned.csv", with_poison=True)
    write_json(pmanifest, out / "poison" / "poison_manifest.json")
    trig, trig_idx = triggered_test_set(cfg, test)
    save_dataset(trig, out / "poison" / "test_triggered.csv")

    per_sigma = {}
    for s0 in cfg.sigma0_grid:
        per_sigma[s0] = run_sigma0(cfg, s0, poisoned, test, trig, trig_idx, out / f"sigma_{s0:g}", workers)

    best = _stage("eval")(best_over_runs)([
        [CurvePoint(**{"radius_threshold": p["radius_threshold"], "era": p["era"], "cra": p["cra"]})
         for p in r["optimized"]["curve"]] for r in per_sigma.values()])
    emit_curves(best, out / "curves_best.csv")
    write_json({
        "per_sigma0": {f"{s:g}": r for s, r in per_sigma.items()},
        "best_over_sigma0": _curve_rows(best),
    }, out / "summary.json")
    write_manifest(out, {"seed": cfg.seed, "stages": ["gen-data", "poison", "train", "optimize-noise",
                                                      "certify", "store-insert", "eval"]})
    return RunResult(out, per_sigma, best)
