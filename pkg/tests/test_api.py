import pytest
from fastapi.testclient import TestClient

from periscope.api import app

INTRINSICS = {"fx": 100, "fy": 100, "cx": 128, "cy": 128}


@pytest.fixture
def client():
    return TestClient(app)


def test_health(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    assert resp.json() == {"status": "ok", "service": "periscope"}


def test_refraction_defaults(client):
    resp = client.post("/api/v1/refraction", json={})
    assert resp.status_code == 200
    rows = resp.json()["rows"]
    assert [r["angle_deg"] for r in rows] == [0, 10, 20, 30, 40, 50, 60]
    assert rows[0]["observed_mm"] == pytest.approx(4.0)


def test_refraction_out_of_range(client):
    resp = client.post("/api/v1/refraction", json={"angles_deg": [75]})
    assert resp.status_code == 422
    assert resp.json()["error"] == "refraction_error"


def test_back_project(client):
    resp = client.post("/api/v1/back-project", json={
        "intrinsics": INTRINSICS,
        "pixels": [[128, 128], [228, 128], [10, 10]],
        "depths": [50, 50, 0],
    })
    assert resp.status_code == 200
    body = resp.json()
    assert body["points_mm"][0] == [0.0, 0.0, 50.0]
    assert body["points_mm"][1] == [50.0, 0.0, 50.0]
    assert body["points_mm"][2] is None
    assert body["n_invalid"] == 1


def test_back_project_length_mismatch(client):
    resp = client.post("/api/v1/back-project", json={
        "intrinsics": INTRINSICS, "pixels": [[1, 1], [2, 2]], "depths": [40],
    })
    assert resp.status_code == 422
    assert resp.json()["error"] == "shape_error"


def test_back_project_rejects_bad_intrinsics(client):
    resp = client.post("/api/v1/back-project", json={
        "intrinsics": {"fx": -1, "fy": 100, "cx": 1, "cy": 1}, "pixels": [[1, 1]], "depths": [40],
    })
    assert resp.status_code == 422


def test_evaluate(client):
    gt = [[30.0, 40.0], [50.0, 60.0]]
    resp = client.post("/api/v1/evaluate", json={"pred_mm": gt, "gt_mm": gt})
    assert resp.status_code == 200
    metrics = resp.json()["metrics"]
    assert metrics["abs_rel"] == 0.0
    assert metrics["delta1"] == 1.0


def test_evaluate_shape_mismatch(client):
    resp = client.post("/api/v1/evaluate", json={"pred_mm": [1.0, 2.0], "gt_mm": [1.0, 2.0, 3.0]})
    assert resp.status_code == 422
    assert resp.json()["error"] == "shape_error"


def test_evaluate_ragged_lists(client):
    resp = client.post("/api/v1/evaluate", json={"pred_mm": [[1.0], [2.0, 3.0]], "gt_mm": [[1.0], [2.0, 3.0]]})
    assert resp.status_code == 422
    assert resp.json()["error"] == "shape_error"
