"""HTTP service over the certification core.

Endpoints
    GET  /health
    POST /radius          certified radius from probability bounds
    POST /bounds          one-sided Clopper-Pearson bounds
    POST /certify/votes   certify raw vote counts
    POST /certify         certify an input with the loaded ensemble
    POST /store/insert    add a certified region to the store
    GET  /store           store snapshot
    GET  /store/verify    pairwise disjointness check

The store is single-writer: inserts are serialised behind a lock and, when a
snapshot path is configured, persisted after each insert.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .certstore import CertStore, CertTriplet
from .ensemble import SmoothedEnsemble, certify_ensemble, load_ensemble
from .errors import SampleCertError
from .noiseopt import SgaConfig, optimize_sigma, sample_seed
from .smoothing import (ABSTAIN, CertificationResult, VoteCounts, binom_lower_bound, binom_upper_bound,
                        certified_radius, certify_counts)

Label = Union[int, Literal["ABSTAIN"]]


class RadiusRequest(BaseModel):
    p_a: float = Field(ge=0, le=1)
    p_b: float = Field(ge=0, le=1)
    sigma: float = Field(gt=0)


class RadiusResponse(BaseModel):
    radius: float


class BoundsRequest(BaseModel):
    k: int = Field(ge=0)
    n: int = Field(ge=1)
    alpha: float = Field(gt=0, lt=1)


class BoundsResponse(BaseModel):
    lower: float
    upper: float


class VotesRequest(BaseModel):
    counts: list[int] = Field(min_length=2)
    sigma: float = Field(gt=0)
    alpha: float = Field(0.001, gt=0, lt=1)


class CertifyRequest(BaseModel):
    x: list[float]
    sigma: Optional[float] = Field(None, gt=0)
    alpha: Optional[float] = Field(None, gt=0, lt=1)
    optimize: bool = False
    sigma0: float = Field(0.5, gt=0)
    iters: int = Field(100, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    seed: int = 0
    store: bool = False


class CertifyResponse(BaseModel):
    label: Label
    radius: float
    p_a_lower: float
    p_b_upper: float
    sigma: float
    store_case: Optional[str] = None


class InsertRequest(BaseModel):
    center: list[float]
    label: int = Field(ge=0)
    radius: float = Field(ge=0)


class InsertResponse(BaseModel):
    case: str
    label: int
    radius: float
    shrink_events: list[dict]


class VerifyResponse(BaseModel):
    ok: bool
    violations: list[tuple[int, int]]


def _response(res: CertificationResult, store_case: str | None = None) -> CertifyResponse:
    return CertifyResponse(
        label="ABSTAIN" if res.label == ABSTAIN else res.label,
        radius=res.radius,
        p_a_lower=res.bounds.p_a_lower,
        p_b_upper=res.bounds.p_b_upper,
        sigma=res.sigma_used,
        store_case=store_case,
    )


def create_app(ensemble: SmoothedEnsemble | None = None, ensemble_path: str | None = None,
               store: CertStore | None = None, store_path: str | None = None,
               alpha: float = 0.001) -> FastAPI:
    if ensemble is None and ensemble_path:
        ensemble = load_ensemble(ensemble_path)
    if store is None:
        store = CertStore.restore(store_path) if store_path and Path(store_path).exists() else CertStore()
    lock = threading.Lock()
    app = FastAPI(title="samplecert")

    @app.exception_handler(SampleCertError)
    async def _domain_error(request: Request, exc: SampleCertError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    def insert(x: np.ndarray, label: int, radius: float):
        with lock:
            final, report = store.insert(CertTriplet(x, label, radius))
            if store_path:
                store.snapshot(store_path)
        return final, report

    @app.get("/health")
    def health():
        return {"status": "ok", "ensemble": ensemble is not None, "store_size": len(store)}

    @app.post("/radius", response_model=RadiusResponse)
    def radius(req: RadiusRequest):
        return RadiusResponse(radius=float(certified_radius(req.p_a, req.p_b, req.sigma)))

    @app.post("/bounds", response_model=BoundsResponse)
    def bounds(req: BoundsRequest):
        if req.k > req.n:
            raise HTTPException(422, "k must not exceed n")
        return BoundsResponse(lower=binom_lower_bound(req.k, req.n, req.alpha),
                              upper=binom_upper_bound(req.k, req.n, req.alpha))

    @app.post("/certify/votes", response_model=CertifyResponse)
    def certify_votes(req: VotesRequest):
        if min(req.counts) < 0 or sum(req.counts) == 0:
            raise HTTPException(422, "counts must be non-negative with a positive total")
        return _response(certify_counts(VoteCounts(tuple(req.counts)), req.sigma, req.alpha))

    @app.post("/certify", response_model=CertifyResponse)
    def certify(req: CertifyRequest):
        if ensemble is None:
            raise HTTPException(503, "no ensemble loaded")
        x = np.asarray(req.x, dtype=np.float64)
        a = req.alpha if req.alpha is not None else alpha
        if req.optimize:
            cfg = SgaConfig(iters=req.iters, learning_rate=req.learning_rate, sigma_init=req.sigma0)
            sigma = optimize_sigma(ensemble, x, cfg, sample_seed(req.seed, x))
        elif req.sigma is not None:
            sigma = req.sigma
        else:
            raise HTTPException(422, "give sigma or set optimize")
        res = certify_ensemble(ensemble, x, sigma, a)
        if not req.store or res.abstained:
            return _response(res)
        final, report = insert(x, res.label, res.radius)
        resp = _response(res, report.case_taken)
        resp.label, resp.radius = final.label, final.radius
        return resp

    @app.post("/store/insert", response_model=InsertResponse)
    def store_insert(req: InsertRequest):
        _, report = insert(np.asarray(req.center, dtype=np.float64), req.label, req.radius)
        return InsertResponse(case=report.case_taken, label=report.final_label,
                              radius=report.final_radius, shrink_events=list(report.shrink_events))

    @app.get("/store")
    def store_snapshot():
        with lock:
            return store.to_dict()

    @app.get("/store/verify", response_model=VerifyResponse)
    def store_verify():
        with lock:
            ok, bad = store.verify()
        return VerifyResponse(ok=ok, violations=bad)

    return app
