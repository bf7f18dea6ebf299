import json

import pytest
from fastapi.testclient import TestClient
from sqlalchemy.orm import sessionmaker

from src.errors import StateError
from src.main import app
from src.models.database import get_db, init_db, make_engine
from src.models.records import BaselineRow, CoveragePoint
from src.services.evaluation import emit_baselines, emit_curve
from src.services.run_registry import RunRegistry


def write_run(root, name, lecomh_accuracies=(0.9, 0.95)):
    run_dir = root / name
    run_dir.mkdir()
    manifest = {
        "config_hash": "ab" * 32,
        "started_at": "2026-01-01T00:00:00+00:00",
        "finished_at": "2026-01-01T00:01:00+00:00",
        "hard_eval": True,
        "files": {},
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest))
    emit_curve(
        [CoveragePoint(float(i), c, 1.0 - c, a) for i, (c, a) in enumerate(zip((0.3, 0.7), lecomh_accuracies))],
        run_dir / "curve_lecomh.csv",
    )
    emit_curve([CoveragePoint(None, 0.0, 3.0, 0.93), CoveragePoint(None, 1.0, 0.0, 0.85)], run_dir / "curve_deferral.csv")
    emit_baselines([BaselineRow("AI", 1.0, 0.0, 0.85), BaselineRow("Majority", 0.0, 3.0, 0.93)], run_dir / "baselines.csv")
    return run_dir


@pytest.fixture
def session_factory():
    engine = make_engine("sqlite://")
    init_db(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@pytest.fixture
def client(session_factory):
    def override_get_db():
        db = session_factory()
        try:
            yield db
        finally:
            db.close()

    app.dependency_overrides[get_db] = override_get_db
    yield TestClient(app)
    app.dependency_overrides.clear()


def test_register_run(tmp_path, session_factory):
    run_dir = write_run(tmp_path, "run-a")
    db = session_factory()
    run = RunRegistry(db).register_run(run_dir)
    assert run.name == "run-a"
    assert run.best_accuracy == 0.95
    assert run.hard_eval == "True"
    methods = sorted({p.method for p in run.points})
    assert methods == ["AI", "Majority", "deferral", "lecomh"]
    assert len(run.points) == 6

    again = RunRegistry(db).register_run(run_dir)
    assert again.id == run.id
    assert len(RunRegistry(db).get_curve(run.id)) == 6
    db.close()


def test_unfinished_run_is_rejected(tmp_path, session_factory):
    (tmp_path / "partial").mkdir()
    with pytest.raises(StateError):
        RunRegistry(session_factory()).register_run(tmp_path / "partial")


def test_index(client):
    assert client.get("/").json()["runs"] == "/api/runs"


def test_scan_and_list(client, tmp_path):
    write_run(tmp_path, "run-a")
    write_run(tmp_path, "run-b", (0.8, 0.85))
    (tmp_path / "unfinished").mkdir()

    response = client.post("/api/runs/scan", json={"directory": str(tmp_path)})
    assert response.status_code == 200
    assert [r["name"] for r in response.json()] == ["run-a", "run-b"]

    runs = client.get("/api/runs").json()
    assert [r["best_accuracy"] for r in runs] == [0.95, 0.85]
    assert client.get("/api/runs", params={"skip": 1}).json()[0]["name"] == "run-b"


def test_scan_missing_directory(client, tmp_path):
    response = client.post("/api/runs/scan", json={"directory": str(tmp_path / "missing")})
    assert response.status_code == 400


def test_get_run_and_curve(client, tmp_path):
    write_run(tmp_path, "run-a")
    run_id = client.post("/api/runs/scan", json={"directory": str(tmp_path)}).json()[0]["id"]

    run = client.get(f"/api/runs/{run_id}").json()
    assert run["config_hash"] == "ab" * 32
    assert run["finished_at"] == "2026-01-01T00:01:00+00:00"

    curve = client.get(f"/api/runs/{run_id}/curve", params={"method": "lecomh"}).json()
    assert [p["coverage"] for p in curve] == [0.3, 0.7]
    assert curve[0]["lambda"] == 0.0
    assert curve[1]["accuracy"] == 0.95

    deferral = client.get(f"/api/runs/{run_id}/curve", params={"method": "deferral"}).json()
    assert [p["lambda"] for p in deferral] == [None, None]
    assert len(client.get(f"/api/runs/{run_id}/curve").json()) == 6


def test_missing_run_is_404(client):
    assert client.get("/api/runs/99").status_code == 404
    assert client.get("/api/runs/99/curve").status_code == 404
    assert client.delete("/api/runs/99").status_code == 404


def test_delete_run(client, tmp_path):
    write_run(tmp_path, "run-a")
    run_id = client.post("/api/runs/scan", json={"directory": str(tmp_path)}).json()[0]["id"]
    assert client.delete(f"/api/runs/{run_id}").status_code == 200
    assert client.get(f"/api/runs/{run_id}").status_code == 404
    assert client.get("/api/runs").json() == []
