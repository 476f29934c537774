import pytest
from fastapi.testclient import TestClient

from main import app


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    assert "message" in response.json()


def test_mfg_endpoint(client, tmp_path):
    response = client.post("/mfg", json={"n_cells": 32, "output_dir": str(tmp_path)})
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "ok"
    assert body["stages"] == ["setup", "mfg"]
    assert "manifest.json" not in body["artifacts"]
    assert body["summary"]["mfg"]["e_max"] > body["summary"]["mfg"]["e_mfg"]


def test_empty_band_is_a_conflict(client, tmp_path):
    response = client.post("/planner", json={"preset": "flat", "output_dir": str(tmp_path)})
    assert response.status_code == 409
    assert response.json()["detail"]["status"] == "empty-band"


def test_invalid_config_is_rejected(client, tmp_path):
    assert client.post("/mfg", json={"n_cells": 4, "output_dir": str(tmp_path)}).status_code == 422
    assert client.post("/mfg", json={"bogus": 1}).status_code == 422


def test_penalized_needs_positive_n(client, tmp_path):
    response = client.post("/penalized", params={"n": -1.0}, json={"n_cells": 32, "output_dir": str(tmp_path)})
    assert response.status_code == 422


def test_unknown_corruption(client):
    assert client.post("/selftest", params={"corrupt": "nothing"}).status_code == 422
