"""
Testes do servico de centralidade (KDE e amostragem do batch).
"""

import numpy as np
import pytest

from app.services.attributes import AttributeRecord, PopulationStats
from app.services.centrality import (
    CentralitySampler,
    kde_density,
    kde_weights,
    sample_weighted,
)
from app.services.exceptions import CentralityError, ContractViolationError


def _records():
    ages = [20, 25, 30, 60, 65, 70, 22, 28, 61, 69]
    sexes = ["F"] * 6 + ["M"] * 4
    return [AttributeRecord.create(a, s) for a, s in zip(ages, sexes)]


@pytest.fixture
def records():
    return _records()


@pytest.fixture
def stats(records):
    return PopulationStats.from_records(records)


class TestKde:
    """Testes para kde_density() e kde_weights()."""

    def test_density_excludes_self(self):
        """Deve ignorar o proprio sujeito na densidade."""
        q = kde_density([0.0, 0.0, 10.0], 1.0)
        np.testing.assert_allclose(q[:2], 1.0)
        assert q[2] > 0

    def test_density_needs_two_subjects(self):
        """Deve rejeitar menos de 2 sujeitos."""
        with pytest.raises(CentralityError):
            kde_density([1.0])

    def test_weights_peak_at_anchor(self):
        """Deve dar peso maximo ao sujeito na ancora com densidades iguais."""
        ages = np.array([-0.5, 0.0, 0.5])
        w = kde_weights(0.0, ages, np.ones(3), 0.5)
        assert np.argmax(w) == 1
        assert w[1] == pytest.approx(1.0)

    def test_weights_divide_by_density(self):
        """Deve reduzir o peso de regioes densas."""
        w = kde_weights(0.0, np.zeros(2), np.array([1.0, 4.0]), 1.0)
        assert w[0] == pytest.approx(4 * w[1])

    def test_weights_shape_mismatch(self):
        """Deve rejeitar idades e densidades de tamanhos diferentes."""
        with pytest.raises(ContractViolationError):
            kde_weights(0.0, np.zeros(2), np.ones(3))

    def test_matches_double_loop(self):
        """Deve coincidir com a soma explicita em lacos duplos para 20 idades."""
        ages = np.random.default_rng(7).uniform(-1, 1, 20)
        sigma_d, sigma_kde, anchor = 0.3, 0.1, 0.25
        q = np.zeros(20)
        for i in range(20):
            for j in range(20):
                if i != j:
                    q[i] += np.exp(-((ages[i] - ages[j]) ** 2) / sigma_d)
        expected = np.array([np.exp(-((anchor - ages[i]) ** 2) / sigma_kde) / q[i] for i in range(20)])

        density = kde_density(ages, sigma_d)
        np.testing.assert_allclose(density, q, rtol=1e-12)
        np.testing.assert_allclose(kde_weights(anchor, ages, density, sigma_kde), expected, rtol=1e-12)


class TestSampleWeighted:
    """Testes para sample_weighted()."""

    def test_without_replacement(self):
        """Deve sortear indices distintos."""
        idx = sample_weighted(np.ones(6), 6, np.random.default_rng(0))
        assert sorted(idx.tolist()) == list(range(6))

    def test_zero_weight_never_chosen_while_mass_remains(self):
        """Nao deve sortear peso zero enquanto houver massa."""
        w = np.array([0.0, 1.0, 0.0, 2.0])
        for seed in range(20):
            idx = sample_weighted(w, 2, np.random.default_rng(seed))
            assert set(idx.tolist()) == {1, 3}

    def test_falls_back_to_uniform(self):
        """Deve completar uniformemente quando a massa zera."""
        idx = sample_weighted(np.array([1.0, 0.0, 0.0]), 3, np.random.default_rng(0))
        assert idx[0] == 0
        assert sorted(idx.tolist()) == [0, 1, 2]

    def test_rejects_oversized_batch(self):
        """Deve rejeitar batch maior que o conjunto."""
        with pytest.raises(ContractViolationError):
            sample_weighted(np.ones(2), 3, np.random.default_rng(0))

    def test_rejects_negative_weights(self):
        """Deve rejeitar pesos negativos."""
        with pytest.raises(ContractViolationError):
            sample_weighted(np.array([1.0, -1.0]), 1, np.random.default_rng(0))

    def test_inclusion_frequencies(self):
        """Deve incluir cada indice com a probabilidade do sorteio sequencial sem reposicao."""
        w = np.array([4.0, 3.0, 2.0, 1.0])
        p = w / w.sum()
        # P(i no batch de 2) = p_i + Σ_{j≠i} p_j · w_i / (W − w_j)
        expected = np.array([
            p[i] + sum(p[j] * w[i] / (w.sum() - w[j]) for j in range(4) if j != i) for i in range(4)
        ])
        np.testing.assert_allclose(expected, [0.715873, 0.608333, 0.441270, 0.234524], atol=1e-6)

        n_draws = 10_000
        rng = np.random.default_rng(2024)
        counts = np.zeros(4)
        for _ in range(n_draws):
            counts[sample_weighted(w, 2, rng)] += 1
        freq = counts / n_draws
        tol = 4 * np.sqrt(expected * (1 - expected) / n_draws)
        assert np.all(np.abs(freq - expected) < tol)
        assert freq.sum() == pytest.approx(2.0)


class TestCentralitySampler:
    """Testes para CentralitySampler.draw()."""

    def test_batch_shares_categorical_group(self, records, stats):
        """Deve sortear o batch no grupo categorico da ancora."""
        sampler = CentralitySampler(records, stats)
        rng = np.random.default_rng(0)
        for _ in range(20):
            plan = sampler.draw(3, rng)
            assert len(plan.indices) == 3
            assert len(set(plan.indices.tolist())) == 3
            assert {records[i].sex for i in plan.indices} == {plan.anchor.sex}
            np.testing.assert_array_equal(plan.central_weights, 1.0)

    def test_batch_clamped_to_group_size(self, records, stats):
        """Deve limitar o batch ao tamanho do grupo."""
        sampler = CentralitySampler(records, stats)
        plan = sampler.draw(8, np.random.default_rng(1))
        assert len(plan.indices) == (6 if plan.anchor.sex == "F" else 4)

    def test_reweight_uses_kde_weights(self, records, stats):
        """Deve usar os pesos KDE em ū com reweight."""
        sampler = CentralitySampler(records, stats, reweight=True)
        plan = sampler.draw(3, np.random.default_rng(2))
        assert np.all(plan.central_weights > 0)
        assert not np.allclose(plan.central_weights, 1.0)

    def test_continuous_anchor_ignores_sex(self, records, stats):
        """Deve usar um unico grupo com ancora continua."""
        sampler = CentralitySampler(records, stats, anchor_kind="continuous")
        assert list(sampler.groups) == [()]
        assert len(sampler.draw(10, np.random.default_rng(0)).indices) == 10

    def test_categorical_anchor_uniform_in_group(self, records, stats):
        """Deve sortear uniformemente no grupo com ancora categorica."""
        sampler = CentralitySampler(records, stats, anchor_kind="categorical")
        plan = sampler.draw(2, np.random.default_rng(3))
        assert {records[i].sex for i in plan.indices} == {plan.anchor.sex}

    def test_lt2019_mode(self, records, stats):
        """Deve usar batch uniforme com pesos unitarios e sem ancora."""
        plan = CentralitySampler(records, stats, mode="lt2019").draw(4, np.random.default_rng(0))
        assert plan.anchor is None and plan.describe() == ""
        np.testing.assert_array_equal(plan.central_weights, 1.0)

    def test_off_mode(self, records, stats):
        """Deve desligar L_central no modo off."""
        plan = CentralitySampler(records, stats, mode="off").draw(4, np.random.default_rng(0))
        assert plan.central_weights is None

    def test_singleton_group_only_affects_its_own_steps(self, stats):
        """Deve manter a centralidade nos outros grupos com um grupo de um sujeito."""
        ages = np.linspace(20, 80, 20)
        recs = [AttributeRecord.create(a, "F") for a in ages] + [AttributeRecord.create(50, "M")]
        sampler = CentralitySampler(recs, stats)
        assert sampler.mode == "conditional"
        assert sampler.sparse_groups == {("M",)}

        rng = np.random.default_rng(0)
        seen = set()
        for _ in range(300):
            plan = sampler.draw(3, rng)
            seen.add(plan.anchor.sex)
            if plan.anchor.sex == "F":
                assert {recs[i].sex for i in plan.indices} == {"F"}
                assert plan.central_weights is not None
            else:
                assert plan.central_weights is None
                assert len(plan.indices) == 3
        assert seen == {"F", "M"}

    def test_single_subject_disables_conditional(self, stats):
        """Deve cair para off quando o treino tem um unico sujeito."""
        sampler = CentralitySampler([AttributeRecord.create(30, "F")], stats)
        assert sampler.mode == "off"
        assert sampler.draw(3, np.random.default_rng(0)).central_weights is None

    def test_deterministic_for_seed(self, records, stats):
        """Deve repetir a sequencia para a mesma semente."""
        a = CentralitySampler(records, stats).draw(3, np.random.default_rng(5))
        b = CentralitySampler(records, stats).draw(3, np.random.default_rng(5))
        np.testing.assert_array_equal(a.indices, b.indices)
        assert a.describe() == b.describe()
