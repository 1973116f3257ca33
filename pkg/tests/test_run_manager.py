"""
Testes dos diretorios de execucao e manifestos.
"""

import json
import logging

import pytest

from app.services import run_manager
from app.services.exceptions import DatasetError
from app.services.run_config import FROZEN_CONFIG_NAME, build_run_config
from app.services.run_manager import MANIFEST_NAME, RunContext


@pytest.fixture
def config(temp_dir):
    return build_run_config({"out": str(temp_dir), "name": "demo run", "seed": 3})


def _manifest(path):
    return json.loads((path / MANIFEST_NAME).read_text())


class TestRunContext:
    """Testes para RunContext."""

    def test_layout_and_status(self, config):
        """Deve criar config congelado, run.log e manifesto completed."""
        with RunContext(config, "train") as run:
            (run.path / "out.txt").write_text("ok")
            logging.getLogger("app.test").warning("dentro da execucao")
        manifest = _manifest(run.path)
        assert manifest["status"] == "completed"
        assert manifest["seed"] == 3
        assert set(manifest["checksums"]) == {FROZEN_CONFIG_NAME, "run.log", "out.txt"}
        assert "dentro da execucao" in (run.path / "run.log").read_text()

    def test_run_id_is_sanitized(self, config):
        """Deve montar o id com comando e nome saneado."""
        with RunContext(config, "train") as run:
            pass
        assert "_train_demo_run_" in run.id
        assert str(run.path.parent) == config.out

    def test_failure_marks_manifest(self, config):
        """Deve marcar failed e propagar a excecao."""
        with pytest.raises(RuntimeError):
            with RunContext(config, "evaluate") as run:
                raise RuntimeError("boom")
        assert _manifest(run.path)["status"] == "failed"

    def test_handler_removed(self, config):
        """Deve remover o handler do run.log ao sair."""
        before = len(logging.getLogger().handlers)
        with RunContext(config, "synth"):
            assert len(logging.getLogger().handlers) == before + 1
        assert len(logging.getLogger().handlers) == before

    def test_extra_is_recorded(self, config):
        """Deve gravar o dicionario extra no manifesto."""
        with RunContext(config, "trend") as run:
            run.extra["dice_mean"] = 0.5
        assert _manifest(run.path)["extra"] == {"dice_mean": 0.5}


class TestVerifyAndList:
    """Testes para verify_run(), list_runs() e find_run()."""

    def test_verify_detects_change(self, config):
        """Deve acusar arquivo alterado depois do manifesto."""
        with RunContext(config, "synth") as run:
            (run.path / "data.txt").write_text("a")
        run_manager.verify_run(run.path)
        (run.path / "data.txt").write_text("b")
        with pytest.raises(DatasetError, match="Checksum"):
            run_manager.verify_run(run.path)

    def test_verify_detects_missing(self, config):
        """Deve acusar arquivo listado e removido."""
        with RunContext(config, "synth") as run:
            (run.path / "data.txt").write_text("a")
        (run.path / "data.txt").unlink()
        with pytest.raises(DatasetError):
            run_manager.verify_run(run.path)

    def test_list_skips_foreign_dirs(self, config, temp_dir):
        """Deve listar so diretorios com manifesto."""
        with RunContext(config, "synth") as a:
            pass
        with RunContext(config, "train") as b:
            pass
        (temp_dir / "stray").mkdir()
        runs = run_manager.list_runs(temp_dir)
        assert {r.id for r in runs} == {a.id, b.id}
        assert all(r.status == "completed" for r in runs)

    def test_list_missing_root(self, temp_dir):
        """Deve devolver lista vazia para raiz inexistente."""
        assert run_manager.list_runs(temp_dir / "none") == []

    def test_find_run(self, config, temp_dir):
        """Deve achar a execucao pelo id."""
        with RunContext(config, "synth") as run:
            pass
        assert run_manager.find_run(temp_dir, run.id) == run.path

    @pytest.mark.parametrize("run_id", ["../etc", "nope", ""])
    def test_find_run_rejects(self, temp_dir, run_id):
        """Deve rejeitar ids inexistentes ou com caminho."""
        with pytest.raises(DatasetError):
            run_manager.find_run(temp_dir, run_id)
