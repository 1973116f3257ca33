"""
Testes do gerador de populacoes sinteticas.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from app.services import synthdata
from app.services.exceptions import ConfigError, SpecRejectedError
from app.services.grid_field import Grid, LabelMap, Volume
from app.services.synthdata import PopulationSpec, generate_population
from tests.conftest import tiny_spec


class TestPopulationSpec:
    """Testes para PopulationSpec e check_spec()."""

    def test_rejects_bad_age_range(self):
        """Deve rejeitar faixa de idade invertida."""
        with pytest.raises(ValidationError):
            PopulationSpec(age_range=(80.0, 20.0))

    def test_rejects_unknown_keys(self):
        """Deve rejeitar chaves desconhecidas."""
        with pytest.raises(ValidationError):
            PopulationSpec(brain_size=1.0)

    def test_rejects_brain_outside_grid(self):
        """Deve rejeitar cerebro que nao cabe no grid."""
        with pytest.raises(SpecRejectedError):
            synthdata.check_spec(tiny_spec(brain_radius=0.98))

    def test_rejects_large_deformation_on_small_grid(self):
        """Deve rejeitar deformacao grande em grid pequeno."""
        with pytest.raises(SpecRejectedError):
            synthdata.check_spec(tiny_spec(grid_dims=(16, 16), deform_amplitude=1.5))

    def test_default_spec_is_accepted(self):
        """Deve aceitar a especificacao padrao."""
        synthdata.check_spec(PopulationSpec())

    def test_radius_laws(self):
        """Deve crescer o ventriculo e encolher o hipocampo com a idade."""
        spec = PopulationSpec()
        assert spec.ventricle_radius(80) > spec.ventricle_radius(20)
        assert spec.hippocampus_radius(80) < spec.hippocampus_radius(20)


class TestGeneratePopulation:
    """Testes para generate_population()."""

    def test_subject_count_and_ids(self, tiny_population):
        """Deve gerar n sujeitos com ids sequenciais."""
        assert len(tiny_population) == 12
        assert tiny_population[0].id == "sub-0000"
        assert tiny_population[11].id == "sub-0011"

    def test_volumes_match_labels(self, tiny_population):
        """Deve registrar volumes iguais a contagem de rotulos."""
        assert all(s.check_volumes() for s in tiny_population)

    def test_all_structures_present(self, tiny_population):
        """Deve conter todas as estruturas em cada sujeito."""
        for s in tiny_population:
            assert np.all(s.volumes[1:] > 0), s.id

    def test_ages_within_range(self, tiny_population):
        """Deve sortear idades na faixa da especificacao."""
        lo, hi = tiny_population.spec.age_range
        assert all(lo <= s.attributes.age <= hi for s in tiny_population)

    def test_deformations_are_diffeomorphic(self, tiny_population):
        """Deve gerar deformacoes sem dobras."""
        assert all(s.metadata["min_jacobian"] > 0 for s in tiny_population)

    def test_deterministic(self):
        """Deve repetir a populacao para a mesma semente, inclusive com threads."""
        a = generate_population(tiny_spec(n_subjects=3))
        b = generate_population(tiny_spec(n_subjects=3), workers=3)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image.data, sb.image.data)
            assert sa.attributes == sb.attributes

    def test_seed_changes_population(self):
        """Deve mudar a populacao com outra semente."""
        a = generate_population(tiny_spec(n_subjects=2))
        b = generate_population(tiny_spec(n_subjects=2, seed=8))
        assert not np.array_equal(a[0].image.data, b[0].image.data)

    def test_ventricle_grows_with_age(self):
        """Deve aumentar o volume do ventriculo com a idade, em media."""
        spec = tiny_spec(n_subjects=40, grid_dims=(48, 48), shape_noise=0.0)
        pop = generate_population(spec)
        ages = np.array([s.attributes.age for s in pop])
        vent = np.array([s.volumes[2] for s in pop], dtype=np.float64)
        assert np.corrcoef(ages, vent)[0, 1] > 0.5

    def test_default_spec_age_ventricle_correlation(self):
        """Deve correlacionar idade e volume do ventriculo acima de 0,8 na especificacao padrao."""
        pop = generate_population(PopulationSpec(n_subjects=200), workers=4)
        ages = np.array([s.attributes.age for s in pop])
        vent = np.array([s.volumes[2] for s in pop], dtype=np.float64)
        assert np.corrcoef(ages, vent)[0, 1] > 0.8

    def test_extras_are_drawn(self):
        """Deve sortear atributos extras declarados."""
        pop = generate_population(tiny_spec(n_subjects=4, extras={"site": ("a", "b")}))
        assert all(s.attributes.extras_dict["site"] in ("a", "b") for s in pop)


class TestClosedLoop:
    """Testes para generate_from_template()."""

    def test_keeps_true_velocity(self):
        """Deve guardar a velocidade verdadeira de cada sujeito."""
        grid = Grid((32, 32))
        labels = np.zeros((32, 32), dtype=np.int32)
        labels[10:22, 10:22] = 1
        image = Volume(grid, labels[None].astype(np.float32))
        ds = synthdata.generate_from_template(image, LabelMap(grid, labels, 2), n=3, amplitude=1.0)
        assert len(ds) == 3
        for s in ds:
            assert s.velocity.kind == "velocity"
            peak = np.sqrt((s.velocity.data ** 2).sum(axis=0)).max()
            assert peak == pytest.approx(1.0)

    def test_rejects_empty(self):
        """Deve rejeitar n < 1."""
        grid = Grid((8, 8))
        with pytest.raises(ConfigError):
            synthdata.generate_from_template(
                Volume(grid, np.zeros((1, 8, 8))), LabelMap(grid, np.zeros((8, 8), dtype=np.int32), 2), 0
            )


class TestSplit:
    """Testes para split()."""

    def test_partition_sizes(self, tiny_population):
        """Deve dar round(n·f) a val e test e o resto ao treino."""
        parts = synthdata.split(tiny_population, (0.5, 0.25, 0.25), seed=0)
        assert (len(parts["train"]), len(parts["val"]), len(parts["test"])) == (6, 3, 3)

    def test_disjoint_and_complete(self, tiny_population):
        """Deve particionar sem sobreposicao."""
        parts = synthdata.split(tiny_population, seed=1)
        ids = [s.id for name in ("train", "val", "test") for s in parts[name]]
        assert sorted(ids) == sorted(s.id for s in tiny_population)

    def test_deterministic(self, tiny_population):
        """Deve repetir a particao para a mesma semente."""
        a = synthdata.split(tiny_population, seed=3)
        b = synthdata.split(tiny_population, seed=3)
        assert [s.id for s in a["val"]] == [s.id for s in b["val"]]

    def test_rejects_bad_fractions(self, tiny_population):
        """Deve rejeitar fracoes que nao somam 1."""
        with pytest.raises(ConfigError):
            synthdata.split(tiny_population, (0.5, 0.5, 0.5))
