import numpy as np
import pytest
from fastapi.testclient import TestClient

from samplecert import service_client
from samplecert.certstore import CertStore
from samplecert.classifiers import TrainConfig
from samplecert.cli import main
from samplecert.datamodel import NoiseAssignment, save_dataset
from samplecert.ensemble import certify_ensemble, save_ensemble, train_ensemble
from samplecert.metrics import read_records
from samplecert.smoothing import binom_lower_bound, certified_radius


@pytest.fixture(scope="module")
def ens():
    from samplecert.datamodel import make_synthetic_gaussians
    data = make_synthetic_gaussians(60, [[-1.5, 0.0], [1.5, 0.0]], 0.8, seed=4)
    return train_ensemble(data, NoiseAssignment.constant(0.5), 20, TrainConfig(arch="linear", steps=50), seed=4)


@pytest.fixture
def client(ens, tmp_path):
    return TestClient(service_app(ens, tmp_path))


def service_app(ens, tmp_path):
    from samplecert.service import create_app
    return create_app(ensemble=ens, store_path=str(tmp_path / "store.json"))


def test_health(client):
    body = client.get("/health").json()
    assert body == {"status": "ok", "ensemble": True, "store_size": 0}


def test_radius_and_bounds_match_core(client):
    r = client.post("/radius", json={"p_a": 0.9, "p_b": 0.1, "sigma": 0.5}).json()["radius"]
    assert r == certified_radius(0.9, 0.1, 0.5)
    b = client.post("/bounds", json={"k": 45, "n": 50, "alpha": 0.001}).json()
    assert b["lower"] == binom_lower_bound(45, 50, 0.001) and b["upper"] > 0.9
    assert client.post("/bounds", json={"k": 51, "n": 50, "alpha": 0.001}).status_code == 422
    assert client.post("/radius", json={"p_a": 1.5, "p_b": 0.1, "sigma": 0.5}).status_code == 422


def test_certify_votes(client):
    body = client.post("/certify/votes", json={"counts": [998, 2], "sigma": 1.0}).json()
    assert body["label"] == 0 and body["radius"] > 0
    assert client.post("/certify/votes", json={"counts": [5, 5], "sigma": 1.0}).json()["label"] == "ABSTAIN"
    assert client.post("/certify/votes", json={"counts": [0, 0], "sigma": 1.0}).status_code == 422


def test_certify_matches_local(client, ens):
    x = [2.5, 0.3]
    body = client.post("/certify", json={"x": x, "sigma": 0.5}).json()
    local = certify_ensemble(ens, np.array(x), 0.5, 0.001)
    assert local.label == 1 and body["radius"] == local.radius and body["label"] == local.label
    assert client.post("/certify", json={"x": x}).status_code == 422
    assert client.post("/certify", json={"x": [1.0, 2.0, 3.0], "sigma": 0.5}).status_code == 422


def test_certify_with_optimized_sigma(client):
    body = client.post("/certify", json={"x": [1.2, 0.3], "optimize": True, "sigma0": 0.5, "iters": 3,
                                         "learning_rate": 0.02}).json()
    assert body["sigma"] > 0


def test_certify_without_ensemble_is_503(tmp_path):
    from samplecert.service import create_app
    c = TestClient(create_app())
    assert c.post("/certify", json={"x": [0.0, 0.0], "sigma": 0.5}).status_code == 503


def test_store_endpoints_persist(client, tmp_path):
    r1 = client.post("/store/insert", json={"center": [0.0, 0.0], "label": 0, "radius": 1.0}).json()
    r2 = client.post("/store/insert", json={"center": [1.5, 0.0], "label": 1, "radius": 1.0}).json()
    assert r1["case"] == "1" and r2["case"] == "3b" and r2["radius"] == 0.5
    assert client.get("/store/verify").json() == {"ok": True, "violations": []}
    assert len(client.get("/store").json()["entries"]) == 2
    assert len(CertStore.restore(tmp_path / "store.json")) == 2
    body = client.post("/certify", json={"x": [-2.5, 0.0], "sigma": 0.5, "store": True}).json()
    assert body["store_case"] is not None
    assert client.get("/store/verify").json()["ok"]


def test_cli_certify_through_server(tmp_path, ens, monkeypatch):
    from samplecert.datamodel import make_synthetic_gaussians
    data = make_synthetic_gaussians(5, [[-1.5, 0.0], [1.5, 0.0]], 0.8, seed=9)
    save_dataset(data, tmp_path / "d.csv")
    save_ensemble(ens, tmp_path / "ens")
    app = service_app(ens, tmp_path / "srv")
    (tmp_path / "srv").mkdir()
    monkeypatch.setattr(service_client.httpx, "Client", lambda base_url, timeout: TestClient(app))
    assert main(["--out-dir", str(tmp_path), "certify", "--server", "http://test", "--data",
                 str(tmp_path / "d.csv"), "--sigma", "0.5", "--output", str(tmp_path / "remote.jsonl")]) == 0
    assert main(["--out-dir", str(tmp_path), "certify", "--ensemble", str(tmp_path / "ens"), "--data",
                 str(tmp_path / "d.csv"), "--sigma", "0.5", "--output", str(tmp_path / "local.jsonl")]) == 0
    remote, local = read_records(tmp_path / "remote.jsonl"), read_records(tmp_path / "local.jsonl")
    assert [(r.certified_label, r.radius) for r in remote] == [(r.certified_label, r.radius) for r in local]
