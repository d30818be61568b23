"""Command-line interface.

Exit codes: 0 success, 1 configuration or usage error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .boundary import BoundarySearchConfig, boundary_distance_histogram
from .certstore import CertStore
from .classifiers import load_model, save_model
from .datamodel import NoiseAssignment, RunConfig, load_dataset, save_dataset
from .ensemble import load_ensemble, save_ensemble, train_ensemble
from .errors import ConfigError, SampleCertError
from .metrics import (CurvePoint, best_over_runs, certification_curve, emit_curves, read_records,
                      summary, write_records)

log = logging.getLogger("samplecert")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, name: str, override: str | None = None) -> Path:
    if override:
        path = Path(override)
    else:
        path = Path(args.out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_target(path: str):
    p = Path(path)
    if p.is_dir() or json.loads(p.read_text()).get("format") == "samplecert-ensemble":
        return load_ensemble(p)
    return load_model(p)


def _sigmas(args, n: int, default: float) -> np.ndarray:
    if getattr(args, "sigma_map", None):
        sig, _ = pl.read_sigma_csv(args.sigma_map)
        if sig.size != n:
            raise ConfigError(f"sigma map has {sig.size} rows for {n} samples")
        return sig
    return np.full(n, args.sigma if args.sigma is not None else default)


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg):
    train, test = pl.gen_data(cfg)
    save_dataset(train, _out(args, "train.csv"))
    save_dataset(test, _out(args, "test.csv"))


def cmd_poison(args, cfg):
    train = load_dataset(args.train)
    test = load_dataset(args.test, train.num_classes) if args.test else None
    if cfg.selection == "map" and test is None:
        raise ConfigError("MAP selection needs --test")
    poisoned, manifest = pl.poison(cfg, train, test if test is not None else train)
    save_dataset(poisoned, _out(args, "train_poisoned.csv"), with_poison=True)
    pl.write_json(manifest, _out(args, "poison_manifest.json"))
    if test is not None:
        trig, _ = pl.triggered_test_set(cfg, test)
        save_dataset(trig, _out(args, "test_triggered.csv"))


def cmd_boundary(args, cfg):
    model = load_model(args.model)
    data = load_dataset(args.data)
    pool = load_dataset(args.pool).X if args.pool else data.X
    bcfg = BoundarySearchConfig(pool, max_iters=args.iters)
    labels = data.y if args.label is None else args.label
    hist = boundary_distance_histogram(model, data, labels, bcfg, args.bins, cfg.seed)
    hist.to_csv(_out(args, "boundary.csv", args.output))
    hist.bins_to_csv(_out(args, "boundary_bins.csv"))
    for i, msg in hist.failures:
        log.warning("sample %d: %s", i, msg)


def cmd_train(args, cfg):
    data = load_dataset(args.data)
    sigma0 = args.sigma0 if args.sigma0 is not None else cfg.sigma0_grid[0]
    if args.single:
        model = pl.train_base(cfg, data, sigma0, pl.rng.derive(cfg.seed, "base"))
        save_model(model, _out(args, "model.json", args.output))
        return
    if args.sigma_map:
        sig, sigma0 = pl.read_sigma_csv(args.sigma_map)
        if sig.size != data.n:
            raise ConfigError(f"sigma map has {sig.size} rows for {data.n} samples")
        assignment = NoiseAssignment({i: float(s) for i, s in enumerate(sig)}, sigma0)
    else:
        assignment = NoiseAssignment.constant(sigma0)
    ens = train_ensemble(data, assignment, cfg.M, pl.model_config(cfg, 0),
                         pl.rng.derive(cfg.seed, "ensemble"), args.workers)
    out = _out(args, "ensemble/manifest.json", args.output and str(Path(args.output) / "manifest.json"))
    save_ensemble(ens, out.parent, {"sigma_map": args.sigma_map, "sigma0": sigma0})


def cmd_optimize_noise(args, cfg):
    target = _load_target(args.target)
    data = load_dataset(args.data)
    sigma0 = args.sigma0 if args.sigma0 is not None else cfg.sigma0_grid[0]
    iters = args.iters if args.iters is not None else cfg.T_infer
    report = pl.optimize_noise(target, data.X, cfg, sigma0, iters,
                               pl.rng.derive(cfg.seed, "sga"), args.workers)
    report.to_csv(_out(args, "noise.csv", args.output))


def cmd_certify(args, cfg):
    data = load_dataset(args.data)
    sig = _sigmas(args, data.n, cfg.sigma0_grid[0])
    if args.server:
        from .service_client import certify_remote
        records = certify_remote(args.server, data, sig, cfg.alpha_conf, args.triggered)
    else:
        ens = load_ensemble(args.ensemble)
        results = pl.certify_inputs(ens, data.X, sig, cfg.alpha_conf, args.workers)
        records = pl.to_records(results, range(data.n), data.y, args.triggered)
    if args.store:
        store_path = Path(args.store)
        store = CertStore.restore(store_path) if store_path.exists() else CertStore(data.dim)
        records = pl.store_update(store, data.X, records)
        store.snapshot(store_path)
    write_records(records, _out(args, "records.jsonl", args.output))


def _run_records(path: Path):
    return read_records(path / "records.jsonl" if path.is_dir() else path)


def cmd_eval(args, cfg):
    grid = cfg.radius_grid
    runs = {str(p): _run_records(Path(p)) for p in args.records}
    per_run = {k: summary(v, grid) for k, v in runs.items()}
    out = {"runs": per_run}
    if len(runs) > 1:
        best = best_over_runs([certification_curve(v, grid) for v in runs.values()])
        out["best_over_runs"] = [{"radius": p.radius_threshold, "era": p.era, "cra": p.cra} for p in best]
    pl.write_json(out, _out(args, "metrics.json", args.output))


def cmd_curves(args, cfg):
    curves = [certification_curve(_run_records(Path(p)), cfg.radius_grid) for p in args.records]
    points: list[CurvePoint] = curves[0] if len(curves) == 1 else best_over_runs(curves)
    emit_curves(points, _out(args, "curves.csv", args.output), args.plot_data)


def cmd_run(args, cfg):
    pl.run_pipeline(cfg, args.out_dir, args.workers)


def cmd_serve(args, cfg):
    import uvicorn

    from .service import create_app

    app = create_app(ensemble_path=args.ensemble, store_path=args.store, alpha=cfg.alpha_conf)
    uvicorn.run(app, host=args.host, port=args.port)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="samplecert", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out-dir", default="out", help="artifact directory (default: out)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", help="synthetic Gaussian-mixture train/test CSVs")

    s = sub.add_parser("poison", help="inject triggers into a training CSV")
    s.add_argument("--train", required=True)
    s.add_argument("--test", help="test CSV; also writes its triggered copy")

    s = sub.add_parser("boundary", help="closest decision-boundary distances")
    s.add_argument("--model", required=True, help="single-model JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--pool", help="CSV of initial points (default: --data)")
    s.add_argument("--label", type=int, help="class whose margin is used (default: each sample's label)")
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--output")

    s = sub.add_parser("train", help="train a smoothed ensemble (or one base model)")
    s.add_argument("--data", required=True)
    s.add_argument("--sigma-map", help="noise CSV from optimize-noise")
    s.add_argument("--sigma0", type=float)
    s.add_argument("--single", action="store_true", help="one model on sigma0-perturbed copies")
    s.add_argument("--output")

    s = sub.add_parser("optimize-noise", help="per-sample sigma by gradient ascent")
    s.add_argument("--target", required=True, help="model JSON or ensemble manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--sigma0", type=float)
    s.add_argument("--iters", type=int)
    s.add_argument("--output")

    s = sub.add_parser("certify", help="certify every row of a CSV")
    s.add_argument("--ensemble", help="ensemble manifest or directory")
    s.add_argument("--server", help="certify through a running service instead")
    s.add_argument("--data", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--sigma-map")
    g.add_argument("--sigma", type=float)
    s.add_argument("--triggered", action="store_true", help="mark records as triggered inputs")
    s.add_argument("--store", help="store snapshot to update in row order")
    s.add_argument("--output")

    for name, fn_help in (("eval", "metrics from record files or run directories"),
                          ("curves", "ERA/CRA curve CSV")):
        s = sub.add_parser(name, help=fn_help)
        s.add_argument("records", nargs="+", help="records.jsonl files or run directories")
        s.add_argument("--output")
        if name == "curves":
            s.add_argument("--plot-data", help="also write the curve as JSON")

    sub.add_parser("run", help="full pipeline")

    s = sub.add_parser("serve", help="HTTP service")
    s.add_argument("--ensemble")
    s.add_argument("--store")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data, "poison": cmd_poison, "boundary": cmd_boundary, "train": cmd_train,
    "optimize-noise": cmd_optimize_noise, "certify": cmd_certify, "eval": cmd_eval,
    "curves": cmd_curves, "run": cmd_run, "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "certify" and not (args.ensemble or args.server):
        print("config error: certify needs --ensemble or --server", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SampleCertError, OSError, ValueError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
