# tests/test_main.py

from unittest.mock import patch
from fastapi.testclient import TestClient

from app.adaptive import AdaptResult
from app.main import app

# Set up FastAPI test client
client = TestClient(app)


# main.py Tests

truncation_rows = [
    {"R_Omega": 40.0, "eta": 1.5e-3, "rho_tr": 2.0e-4},
    {"R_Omega": 80.0, "eta": 1.4e-3, "rho_tr": 7.0e-5},
]


def test_health_endpoint():
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_truncation_run():
    with patch('app.main.run_truncation') as mock_truncation:
        mock_truncation.return_value = truncation_rows
        response = client.post("/runs", json={"mode": "truncation", "config": {"truncation": {"radii": [40, 80]}}})
        assert response.status_code == 200
        assert response.json() == {"mode": "truncation", "rows": truncation_rows}
        config = mock_truncation.call_args.args[0]
        assert config.truncation.radii == [40.0, 80.0]


def test_adaptive_run_reports_stop_reason():
    with patch('app.main.run_adaptive') as mock_adaptive:
        mock_adaptive.return_value = ([], AdaptResult(states=[], stopped_reason="tolerance"))
        response = client.post("/runs", json={"mode": "Adaptive"})
        assert response.status_code == 200
        assert response.json() == {"mode": "adaptive", "rows": [], "stopped_reason": "tolerance", "error": None}


def test_run_missing_mode():
    response = client.post("/runs", json={"config": {}})
    assert response.status_code == 422
    assert "detail" in response.json()


def test_run_mode_inside_config():
    response = client.post("/runs", json={"mode": "apriori", "config": {"mode": "adaptive"}})
    assert response.status_code == 422
    assert "detail" in response.json()


def test_run_invalid_config():
    response = client.post("/runs", json={"mode": "apriori", "config": {"regions": {"atomistic_radius": 70, "blending_width": 20}}})
    assert response.status_code == 400
    assert "must be smaller than R_Omega" in response.json().get("detail", "")


def test_run_unknown_section_key():
    response = client.post("/runs", json={"mode": "apriori", "config": {"solver": {"tolerance": 1e-8}}})
    assert response.status_code == 400


def test_run_value_error():
    with patch('app.main.run_apriori') as mock_apriori:
        mock_apriori.side_effect = ValueError("BQCF has no energy functional")
        response = client.post("/runs", json={"mode": "apriori", "config": {"method": {"name": "bqcf1"}}})
        assert response.status_code == 400
        assert "BQCF has no energy functional" in response.json().get("detail", "")


def test_run_internal_error():
    with patch('app.main.run_apriori') as mock_apriori:
        mock_apriori.side_effect = Exception("Line search failed at iteration 3")
        response = client.post("/runs", json={"mode": "apriori"})
        assert response.status_code == 500
        assert "Internal Server Error: Line search failed at iteration 3" in response.json().get("detail", "")
