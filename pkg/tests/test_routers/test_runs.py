"""
Testes de integracao para o router de execucoes.
"""

import csv

import pytest

from app.main import app
from app.services.run_config import build_run_config
from app.services.run_manager import RunContext
from app.services.trainer import LOSS_COLUMNS, LOSSES_NAME


@pytest.fixture
def runs_dir(temp_dir, monkeypatch):
    """Aponta o visualizador para um diretorio temporario."""
    monkeypatch.setattr(app.state, "runs_dir", temp_dir, raising=False)
    return temp_dir


def _make_run(root, command="train", with_losses=True):
    config = build_run_config({"out": str(root), "name": "view"})
    with RunContext(config, command) as run:
        if with_losses:
            with open(run.path / LOSSES_NAME, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS)
                writer.writeheader()
                for step in (1, 2):
                    writer.writerow({
                        "step": step, "epoch": 0, "img": 0.5, "seg": -0.8, "smooth": 0.01,
                        "central": 0.0, "total": -0.29, "anchor": "joint#3",
                    })
    return run


class TestHealth:
    """Testes para GET /api/health."""

    def test_ok(self, client):
        """Deve responder ok com a versao."""
        response = client.get("/api/health")
        assert response.status_code == 200
        assert response.json()["status"] == "ok"
        assert response.headers["X-Frame-Options"] == "DENY"


class TestListRuns:
    """Testes para GET /api/runs."""

    def test_empty(self, client, runs_dir):
        """Deve devolver lista vazia sem execucoes."""
        assert client.get("/api/runs").json() == []

    def test_lists_runs(self, client, runs_dir):
        """Deve listar as execucoes com seus arquivos."""
        run = _make_run(runs_dir)
        data = client.get("/api/runs").json()
        assert len(data) == 1
        assert data[0]["id"] == run.id
        assert data[0]["command"] == "train"
        assert LOSSES_NAME in data[0]["files"]


class TestLosses:
    """Testes para GET /api/runs/{run_id}/losses."""

    def test_returns_rows(self, client, runs_dir):
        """Deve devolver as linhas do losses.csv."""
        run = _make_run(runs_dir)
        data = client.get(f"/api/runs/{run.id}/losses").json()
        assert data["run_id"] == run.id
        assert [r["step"] for r in data["rows"]] == [1, 2]
        assert data["rows"][0]["anchor"] == "joint#3"

    def test_unknown_run(self, client, runs_dir):
        """Deve devolver 404 para execucao inexistente."""
        assert client.get("/api/runs/nope/losses").status_code == 404

    def test_run_without_losses(self, client, runs_dir):
        """Deve devolver 404 para execucao sem curva."""
        run = _make_run(runs_dir, "synth", with_losses=False)
        assert client.get(f"/api/runs/{run.id}/losses").status_code == 404
