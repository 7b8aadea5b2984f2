import pytest
from fastapi.testclient import TestClient

from main import app


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setenv("RESULTS_DIR", str(tmp_path))
    return TestClient(app)


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "healthy"
    assert "estimate" in body["subcommands"]


def test_defaults_and_subcommands(client):
    assert client.get("/api/config/defaults").json()["kernel"]["a"] == 0.99
    assert client.get("/api/runs/subcommands").json() == [
        "estimate", "tv-curve", "verify-lyapunov", "limit-laws", "crude-oracle", "simulate-paths",
    ]


def test_validate_returns_normalized_target(client, raw_config):
    raw_config["target"]["vstar"] = [[2.0, 0.0]]
    raw_config["target"]["astar"] = [3.0]
    body = client.post("/api/config/validate", json=raw_config).json()
    assert body["valid"] is True
    assert body["normalized_target"] == {"vstar": [[1.0, 0.0]], "astar": [1.5]}
    assert body["shift"] == pytest.approx([-8.0 / 3.0, -1.0])
    assert body["effective_config"]["kernel"]["value_strategy"] == "ExactRadial"


def test_config_errors_are_unprocessable(client, raw_config):
    raw_config["sim"]["bogus"] = True
    response = client.post("/api/config/validate", json=raw_config)
    assert response.status_code == 422
    assert response.json()["detail"]["error"] == "SchemaError"


def test_run_estimate(client, raw_config, tmp_path):
    response = client.post("/api/runs/estimate", params={"paths": 100, "seed": 3}, json=raw_config)
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == 0
    assert body["summary"]["n_paths"] == 100
    assert body["summary"]["seed"] == 3
    assert (tmp_path / "estimate" / "estimate.json").is_file()


def test_run_failures(client, raw_config):
    assert client.post("/api/runs/bogus", json=raw_config).status_code == 404
    raw_config["sim"]["grid_states"] = [[0.95, 0.0]]
    response = client.post("/api/runs/verify-lyapunov", json=raw_config)
    assert response.status_code == 400
    assert response.json()["detail"]["error"] == "PreconditionViolation"
