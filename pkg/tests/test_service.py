import pytest
from fastapi.testclient import TestClient

from debiaskit.service import create_app


def tiny_config_dict(seed=7):
    from debiaskit.pipeline import default_synth_config

    raw = default_synth_config(seed=seed, train_count=120, test_count=40,
                               conflict_ratio=0.05).to_dict()
    raw["biased_training"]["epochs"] = 2
    raw["debias_training"]["epochs"] = 2
    raw["extraction"] = {"k": 5}
    raw["generation"]["size"] = 32
    raw["generation"]["target"] = 12
    return raw


@pytest.fixture()
def client(tmp_path):
    app = create_app(runs_root=tmp_path / "runs")
    return TestClient(app)


class TestHealth:
    def test_health(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"

    def test_stage_listing(self, client):
        resp = client.get("/stages")
        assert "train-biased" in resp.json()["stages"]


class TestRunLifecycle:
    def test_create_and_get(self, client):
        resp = client.post("/runs", json={"config": tiny_config_dict()})
        assert resp.status_code == 200, resp.text
        run = resp.json()
        assert run["run_id"].startswith("run-")
        got = client.get(f"/runs/{run['run_id']}")
        assert got.status_code == 200
        assert got.json()["run_dir"] == run["run_dir"]

    def test_create_requires_exactly_one_config_source(self, client):
        resp = client.post("/runs", json={})
        assert resp.status_code == 422

    def test_invalid_config_rejected_422(self, client):
        raw = tiny_config_dict()
        raw["generation"]["backend"] = "not-registered"
        resp = client.post("/runs", json={"config": raw})
        assert resp.status_code == 422
        assert "unregistered" in resp.json()["detail"]

    def test_unknown_run_404(self, client):
        assert client.get("/runs/run-nope").status_code == 404

    def test_stage_execution_and_upstream_conflict(self, client):
        run = client.post("/runs", json={"config": tiny_config_dict()}).json()
        resp = client.post(f"/runs/{run['run_id']}/stages/synth")
        assert resp.status_code == 200
        assert resp.json()["record"]["status"] == "completed"
        # extract before train-biased: the missing stage is named
        resp = client.post(f"/runs/{run['run_id']}/stages/extract")
        assert resp.status_code == 409
        assert "train-biased" in resp.json()["detail"]

    def test_unknown_stage_422(self, client):
        run = client.post("/runs", json={"config": tiny_config_dict()}).json()
        assert client.post(f"/runs/{run['run_id']}/stages/nope").status_code == 422

    def test_metrics_404_before_evaluate(self, client):
        run = client.post("/runs", json={"config": tiny_config_dict()}).json()
        assert client.get(f"/runs/{run['run_id']}/metrics").status_code == 404

    def test_run_all_and_artifacts(self, client):
        run = client.post("/runs", json={"config": tiny_config_dict()}).json()
        resp = client.post(f"/runs/{run['run_id']}/run-all", json={"resume": True})
        assert resp.status_code == 200, resp.text
        stages = resp.json()["stages"]
        assert all(rec["status"] == "completed" for rec in stages.values())
        metrics = client.get(f"/runs/{run['run_id']}/metrics")
        assert metrics.status_code == 200
        assert "debiased.test.overall_acc" in metrics.json()["metrics"]
        report = client.get(f"/runs/{run['run_id']}/report")
        assert report.status_code == 200
        names = {row["name"] for row in report.json()["rows"]}
        assert names == {"vanilla", "biased", "debiased"}
        listing = client.get("/runs")
        assert len(listing.json()["runs"]) == 1

    def test_seed_override(self, client):
        resp = client.post("/runs", json={"config": tiny_config_dict(), "seed": 42})
        assert resp.json()["run_id"]
        run_dir = resp.json()["run_dir"]
        import json as _json
        from pathlib import Path

        stored = _json.loads((Path(run_dir) / "run.json").read_text())
        assert stored["config"]["seed"] == 42
