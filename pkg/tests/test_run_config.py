"""
Testes da configuracao de execucao (parser chave = valor e validacao).
"""

import pytest

from app.services import run_config
from app.services.exceptions import ConfigError
from app.services.run_config import RunConfig, build_run_config, load_run_config
from tests.conftest import tiny_run_flags


class TestParseValue:
    """Testes para parse_value()."""

    @pytest.mark.parametrize("raw,expected", [
        ("3", 3),
        ("0.5", 0.5),
        ('"cond-no-seg"', "cond-no-seg"),
        ("cond-no-seg", "cond-no-seg"),
        ("64, 64", [64, 64]),
        ("[1, 2]", [1, 2]),
        ("True", True),
        ("false", False),
    ])
    def test_values(self, raw, expected):
        """Deve interpretar JSON, listas sem colchetes e strings soltas."""
        assert run_config.parse_value(raw) == expected


class TestReadConfigFile:
    """Testes para read_config_file()."""

    def test_comments_and_later_keys_win(self, temp_dir):
        """Deve ignorar comentarios e manter a ultima ocorrencia."""
        path = temp_dir / "a.cfg"
        path.write_text('# topo\nseed = 1\nname = "x#y"  # fim\n\nseed = 2\n')
        assert run_config.read_config_file(path) == {"seed": 2, "name": "x#y"}

    def test_include_is_relative(self, temp_dir):
        """Deve resolver include relativo ao arquivo que inclui."""
        (temp_dir / "sub").mkdir()
        (temp_dir / "sub" / "base.cfg").write_text("seed = 5\ntrain.epochs = 3\n")
        path = temp_dir / "sub" / "run.cfg"
        path.write_text("include = base.cfg\ntrain.epochs = 9\n")
        assert run_config.read_config_file(path) == {"seed": 5, "train.epochs": 9}

    def test_include_cycle(self, temp_dir):
        """Deve detectar ciclo de include."""
        (temp_dir / "a.cfg").write_text("include = b.cfg\n")
        (temp_dir / "b.cfg").write_text("include = a.cfg\n")
        with pytest.raises(ConfigError, match="Ciclo"):
            run_config.read_config_file(temp_dir / "a.cfg")

    def test_line_without_equals(self, temp_dir):
        """Deve apontar arquivo e linha do erro."""
        path = temp_dir / "bad.cfg"
        path.write_text("seed = 1\nnonsense\n")
        with pytest.raises(ConfigError, match=":2:"):
            run_config.read_config_file(path)

    def test_missing_file(self, temp_dir):
        """Deve rejeitar arquivo ausente."""
        with pytest.raises(ConfigError):
            run_config.read_config_file(temp_dir / "none.cfg")


class TestBuildRunConfig:
    """Testes para build_run_config() e RunConfig."""

    def test_defaults(self):
        """Deve validar a configuracao padrao."""
        config = build_run_config({})
        assert config.model.grid_dims == config.population.grid_dims
        assert config.dtype == "float32"

    def test_grid_follows_model(self):
        """Deve propagar model.grid_dims para a populacao."""
        config = build_run_config({"model.grid_dims": [32, 32]})
        assert config.population.grid_dims == (32, 32)

    def test_grid_mismatch(self):
        """Deve rejeitar grids diferentes entre modelo e populacao."""
        with pytest.raises(ConfigError):
            build_run_config({"model.grid_dims": [32, 32], "population.grid_dims": [64, 64]})

    def test_unknown_key(self):
        """Deve rejeitar chave desconhecida com o caminho no erro."""
        with pytest.raises(ConfigError, match="train.epoch"):
            build_run_config({"train.epoch": 3})

    def test_invalid_value(self):
        """Deve rejeitar valores fora do dominio."""
        with pytest.raises(ConfigError):
            build_run_config({"model.variant": "sideways"})
        with pytest.raises(ConfigError):
            build_run_config({"data.split_fractions": [0.5, 0.5, 0.5]})

    def test_scalar_conflict(self):
        """Deve rejeitar chave pontuada sob valor escalar."""
        with pytest.raises(ConfigError):
            build_run_config({"seed": 1, "seed.x": 2})

    def test_with_overrides(self, temp_dir):
        """Deve revalidar a copia com as chaves trocadas."""
        config = build_run_config(tiny_run_flags(temp_dir))
        other = config.with_overrides({"model.variant": "uncond", "seed": 4})
        assert other.model.variant == "uncond"
        assert other.seed == 4
        assert config.model.variant == "cond"


class TestFrozenConfig:
    """Testes para freeze() e write_frozen()."""

    def test_frozen_reloads_identical(self, temp_dir):
        """Deve reler o config congelado sem diferencas."""
        config = build_run_config(tiny_run_flags(temp_dir, **{"population.extras": {"site": ["a", "b"]}}))
        path = config.write_frozen(temp_dir)
        assert load_run_config(path) == config

    def test_frozen_keys_sorted(self):
        """Deve ordenar as chaves."""
        keys = [line.split(" = ")[0] for line in RunConfig().freeze().splitlines()]
        assert keys == sorted(keys)


class TestLoadRunConfig:
    """Testes para load_run_config()."""

    def test_precedence(self, temp_dir):
        """Deve aplicar arquivo, depois --set, depois flags."""
        path = temp_dir / "run.cfg"
        path.write_text("seed = 1\nthreads = 2\ntrain.epochs = 4\n")
        config = load_run_config(path, ["seed=2", "train.epochs=7"], {"seed": 3, "threads": None})
        assert config.seed == 3
        assert config.threads == 2
        assert config.train.epochs == 7

    def test_override_without_equals(self):
        """Deve rejeitar --set sem '='."""
        with pytest.raises(ConfigError):
            load_run_config(None, ["seed"])
