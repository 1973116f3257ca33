"""
Testes da linha de comando (ponta a ponta no modelo pequeno).
"""

import csv
import json

import pytest

from app import cli
from app.config import CHECKPOINT_ENV
from app.services import volume_io
from app.services.run_manager import MANIFEST_NAME, verify_run
from tests.conftest import tiny_run_flags


def _write_config(path, out_dir, **overrides):
    flat = tiny_run_flags(out_dir, **overrides)
    path.write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in flat.items()))
    return path


def _only_run(root, command):
    runs = sorted(root.glob(f"*_{command}_*"))
    assert len(runs) == 1, runs
    return runs[0]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Treina uma vez e devolve (arquivo de config, checkpoint)."""
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_config(root / "tiny.cfg", root / "runs")
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_OK
    run = _only_run(root / "runs", "train")
    return cfg, run / "checkpoint.ckpt"


class TestParser:
    """Testes para build_parser()."""

    def test_all_commands_registered(self):
        """Deve expor todos os comandos."""
        for command in cli.COMMANDS:
            if command in ("register",):
                args = cli.build_parser().parse_args([command, "--image", "x", "--age", "1", "--sex", "F"])
            else:
                args = cli.build_parser().parse_args([command])
            assert args.command == command

    def test_set_is_repeatable(self):
        """Deve acumular --set."""
        args = cli.build_parser().parse_args(["synth", "--set", "seed=1", "--set", "name=x"])
        assert args.set == ["seed=1", "name=x"]


class TestErrors:
    """Testes de codigos de saida."""

    def test_invalid_config_exits_2(self, temp_dir):
        """Deve sair com 2 para configuracao invalida."""
        assert cli.main(["synth", "--out", str(temp_dir), "--set", "model.variant=sideways"]) == cli.EXIT_ATLAS_ERROR

    def test_missing_checkpoint_exits_2(self, temp_dir, monkeypatch):
        """Deve exigir --checkpoint ou a variavel de ambiente."""
        monkeypatch.delenv(CHECKPOINT_ENV, raising=False)
        cfg = _write_config(temp_dir / "c.cfg", temp_dir)
        assert cli.main(["template", "--config", str(cfg)]) == cli.EXIT_ATLAS_ERROR

    def test_bad_number_list_exits_2(self, trained, temp_dir):
        """Deve rejeitar lista de idades invalida."""
        cfg, ckpt = trained
        args = ["template", "--config", str(cfg), "--out", str(temp_dir), "--checkpoint", str(ckpt), "--ages", "a,b"]
        assert cli.main(args) == cli.EXIT_ATLAS_ERROR


class TestSynth:
    """Testes para o comando synth."""

    def test_writes_dataset(self, temp_dir):
        """Deve gravar o dataset e um manifesto valido."""
        cfg = _write_config(temp_dir / "c.cfg", temp_dir / "runs")
        assert cli.main(["synth", "--config", str(cfg)]) == cli.EXIT_OK
        run = _only_run(temp_dir / "runs", "synth")
        assert (run / "dataset" / "manifest.json").is_file()
        assert json.loads((run / MANIFEST_NAME).read_text())["status"] == "completed"
        verify_run(run)


class TestTrainedModelCommands:
    """Testes para template, register, evaluate, trend e retomada."""

    def test_train_outputs(self, trained):
        """Deve gravar checkpoint, losses e config congelado."""
        _, ckpt = trained
        run = ckpt.parent
        assert ckpt.is_file()
        assert (run / "losses.csv").is_file()
        assert (run / "config.frozen.cfg").is_file()
        verify_run(run)

    def test_template(self, trained, temp_dir):
        """Deve gravar VOLB por idade, montagem e GIF."""
        cfg, ckpt = trained
        args = ["template", "--config", str(cfg), "--out", str(temp_dir), "--checkpoint", str(ckpt),
                "--ages", "30,60", "--sex", "F"]
        assert cli.main(args) == cli.EXIT_OK
        run = _only_run(temp_dir, "template")
        for name in ("template_F_30.volb", "template_F_60_labels.volb", "montage_F.pgm", "ages_F.gif"):
            assert (run / name).is_file(), name
        assert volume_io.read_volume(run / "template_F_30.volb").grid.dims == (32, 32)

    def test_register(self, trained, temp_dir, tiny_population):
        """Deve gravar deslocamento, inverso, Jacobiano e rotulos."""
        cfg, ckpt = trained
        image = temp_dir / "sub.volb"
        volume_io.write_volume(image, tiny_population[0].image)
        args = ["register", "--config", str(cfg), "--out", str(temp_dir / "runs"), "--checkpoint", str(ckpt),
                "--image", str(image), "--age", "63", "--sex", "F"]
        assert cli.main(args) == cli.EXIT_OK
        run = _only_run(temp_dir / "runs", "register")
        u = volume_io.read_field(run / "displacement.volb")
        assert u.kind == "displacement"
        for name in ("inverse_displacement.volb", "warped_template.volb", "jacobian.volb", "labels.volb", "panel.pgm"):
            assert (run / name).is_file(), name

    def test_checkpoint_from_environment(self, trained, temp_dir, monkeypatch):
        """Deve aceitar o checkpoint pela variavel de ambiente."""
        cfg, ckpt = trained
        monkeypatch.setenv(CHECKPOINT_ENV, str(ckpt))
        args = ["evaluate", "--config", str(cfg), "--out", str(temp_dir), "--split", "val"]
        assert cli.main(args) == cli.EXIT_OK

    def test_evaluate(self, trained, temp_dir, capsys):
        """Deve gravar metricas e imprimir o agregado."""
        cfg, ckpt = trained
        args = ["evaluate", "--config", str(cfg), "--out", str(temp_dir), "--checkpoint", str(ckpt)]
        assert cli.main(args) == cli.EXIT_OK
        run = _only_run(temp_dir, "evaluate")
        assert (run / "metrics.csv").is_file()
        assert "dice_mean" in capsys.readouterr().out

    def test_evaluate_unknown_split(self, trained, temp_dir):
        """Deve rejeitar particao desconhecida."""
        cfg, ckpt = trained
        args = ["evaluate", "--config", str(cfg), "--out", str(temp_dir), "--checkpoint", str(ckpt),
                "--split", "holdout"]
        assert cli.main(args) == cli.EXIT_ATLAS_ERROR

    def test_trend(self, trained, temp_dir, capsys):
        """Deve gravar tendencia por sexo e a coluna de referencia."""
        cfg, ckpt = trained
        args = ["trend", "--config", str(cfg), "--out", str(temp_dir), "--checkpoint", str(ckpt),
                "--lt2019", str(ckpt)]
        assert cli.main(args) == cli.EXIT_OK
        run = _only_run(temp_dir, "trend")
        for sex in ("F", "M"):
            with open(run / sex / "trend.csv", newline="") as f:
                rows = list(csv.DictReader(f))
            assert len(rows) == 4
        assert "lt2019_rel_err" in capsys.readouterr().out

    def test_resume_continues_losses(self, trained, temp_dir):
        """Deve continuar a numeracao de passos em um novo diretorio."""
        cfg, ckpt = trained
        args = ["train", "--config", str(cfg), "--out", str(temp_dir), "--resume", str(ckpt),
                "--set", "train.epochs=3"]
        assert cli.main(args) == cli.EXIT_OK
        run = _only_run(temp_dir, "train")
        with open(run / "losses.csv", newline="") as f:
            steps = [int(r["step"]) for r in csv.DictReader(f)]
        assert steps == list(range(1, 7))
        assert json.loads((run / MANIFEST_NAME).read_text())["extra"]["resumed_from"] == str(ckpt)


class TestGradcheckCommand:
    """Testes para o comando gradcheck."""

    def test_ops_only(self, temp_dir, capsys):
        """Deve passar em todas as operacoes e gravar tabela e CSV."""
        assert cli.main(["gradcheck", "--out", str(temp_dir), "--ops-only"]) == cli.EXIT_OK
        run = _only_run(temp_dir, "gradcheck")
        assert (run / "gradcheck.csv").is_file()
        assert "FAIL" not in capsys.readouterr().out


class TestAblation:
    """Testes para o comando ablation."""

    def test_one_row_per_combination(self, temp_dir):
        """Deve treinar e avaliar cada variante."""
        cfg = _write_config(temp_dir / "c.cfg", temp_dir / "runs", **{"train.epochs": 1})
        assert cli.main(["ablation", "--config", str(cfg), "--variants", "cond,uncond"]) == cli.EXIT_OK
        run = _only_run(temp_dir / "runs", "ablation")
        with open(run / "ablation.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["variant"] for r in rows] == ["cond", "uncond"]
        assert (run / "cond_conditional_mean-of-4_s0" / "checkpoint.ckpt").is_file()


class TestPopulationWithExtras:
    """Testes dos comandos em populacao com atributos extras."""

    @pytest.fixture(scope="class")
    def staged(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("cli_extras")
        cfg = _write_config(root / "staged.cfg", root / "runs",
                            **{"population.extras": {"stage": ["CN", "AD"]}, "train.epochs": 1})
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_OK
        return cfg, _only_run(root / "runs", "train") / "checkpoint.ckpt"

    def test_trend_per_level(self, staged, temp_dir):
        """Deve gravar uma tendencia por sexo e grupo de extras."""
        cfg, ckpt = staged
        args = ["trend", "--config", str(cfg), "--out", str(temp_dir), "--checkpoint", str(ckpt)]
        assert cli.main(args) == cli.EXIT_OK
        run = _only_run(temp_dir, "trend")
        for tag in ("F_stage-CN", "F_stage-AD", "M_stage-CN", "M_stage-AD"):
            assert (run / tag / "trend.csv").is_file(), tag

    def test_template_all_levels(self, staged, temp_dir):
        """Deve gerar templates de todos os grupos sem --extras."""
        cfg, ckpt = staged
        args = ["template", "--config", str(cfg), "--out", str(temp_dir), "--checkpoint", str(ckpt),
                "--ages", "40", "--sex", "F"]
        assert cli.main(args) == cli.EXIT_OK
        run = _only_run(temp_dir, "template")
        assert (run / "template_F_stage-CN_40.volb").is_file()
        assert (run / "montage_F_stage-AD.pgm").is_file()

    def test_template_single_level(self, staged, temp_dir):
        """Deve gerar so o grupo pedido em --extras."""
        cfg, ckpt = staged
        args = ["template", "--config", str(cfg), "--out", str(temp_dir), "--checkpoint", str(ckpt),
                "--ages", "40", "--sex", "M", "--extras", "stage=AD"]
        assert cli.main(args) == cli.EXIT_OK
        run = _only_run(temp_dir, "template")
        assert [p.name for p in run.glob("montage_*.pgm")] == ["montage_M_stage-AD.pgm"]

    def test_register_requires_declared_extras(self, staged, temp_dir, tiny_population):
        """Deve sair com 2 sem os extras e registrar com eles."""
        cfg, ckpt = staged
        image = temp_dir / "sub.volb"
        volume_io.write_volume(image, tiny_population[0].image)
        base = ["register", "--config", str(cfg), "--out", str(temp_dir / "runs"), "--checkpoint", str(ckpt),
                "--image", str(image), "--age", "50", "--sex", "F"]
        assert cli.main(base) == cli.EXIT_ATLAS_ERROR
        assert cli.main(base + ["--extras", "stage=CN"]) == cli.EXIT_OK
