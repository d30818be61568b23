"""Client side of ``certify --server``."""

from __future__ import annotations

import httpx
import numpy as np

from .datamodel import Dataset
from .errors import SampleCertError
from .metrics import CertRecord
from .smoothing import ABSTAIN


def certify_remote(url: str, data: Dataset, sigmas: np.ndarray, alpha: float, triggered: bool,
                   client: httpx.Client | None = None) -> list[CertRecord]:
    own = client is None
    client = client or httpx.Client(base_url=url, timeout=60.0)
    try:
        out = []
        for i in range(data.n):
            resp = client.post("/certify", json={"x": data.X[i].tolist(), "sigma": float(sigmas[i]),
                                                 "alpha": alpha})
            if resp.status_code != 200:
                raise SampleCertError(f"server rejected row {i}: {resp.status_code} {resp.text}")
            body = resp.json()
            label = ABSTAIN if body["label"] == "ABSTAIN" else int(body["label"])
            out.append(CertRecord(i, triggered, int(data.y[i]), label, body["radius"], body["sigma"],
                                  body["p_a_lower"], body["p_b_upper"]))
        return out
    finally:
        if own:
            client.close()
