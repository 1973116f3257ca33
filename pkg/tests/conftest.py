"""
Fixtures compartilhadas para testes do Atlas Lab.
"""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.services.attributes import PopulationStats
from app.services.models import AtlasModel, ModelConfig
from app.services.synthdata import PopulationSpec, generate_population


# ============================================
# Testes lentos (reproduções ponta a ponta)
# ============================================
def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Roda testes marcados como slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: reprodução longa, só com --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="precisa de --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ============================================
# Client FastAPI
# ============================================
@pytest.fixture
def client(monkeypatch):
    """Cliente de teste para FastAPI (sem abrir browser)."""
    monkeypatch.setattr("app.main.HEADLESS", True)
    return TestClient(app)


# ============================================
# Diretorio temporario
# ============================================
@pytest.fixture
def temp_dir():
    """Cria diretorio temporario que e limpo apos o teste."""
    tmp = tempfile.mkdtemp()
    yield Path(tmp)
    shutil.rmtree(tmp)


# ============================================
# Populacao e modelo pequenos
# ============================================
def tiny_spec(**overrides) -> PopulationSpec:
    """32x32 com deformação menor e linha média mais larga (visível em grid par)."""
    base = dict(
        n_subjects=12, grid_dims=(32, 32), deform_amplitude=0.5, deform_control=4,
        midline_halfwidth=0.05, seed=7,
    )
    base.update(overrides)
    return PopulationSpec(**base)


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        grid_dims=(32, 32),
        upsample_stages=2,
        base_features=4,
        unet_encoder=(4, 4),
        unet_decoder=(4, 4, 4),
        integration_steps=4,
        init_spec="mean-of-4",
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_run_flags(out_dir, **overrides) -> dict:
    """Chaves pontuadas de um RunConfig com o modelo e a população pequenos."""
    flat = {
        "out": str(out_dir),
        "seed": 0,
        "model.grid_dims": [32, 32],
        "model.upsample_stages": 2,
        "model.base_features": 4,
        "model.unet_encoder": [4, 4],
        "model.unet_decoder": [4, 4, 4],
        "model.integration_steps": 4,
        "model.init_spec": "mean-of-4",
        "population.n_subjects": 12,
        "population.deform_amplitude": 0.5,
        "population.deform_control": 4,
        "population.midline_halfwidth": 0.05,
        "population.seed": 7,
        "data.split_fractions": [0.5, 0.25, 0.25],
        "train.epochs": 2,
        "train.batch_size": 2,
        "train.steps_per_epoch": 2,
        "train.val_subjects": 2,
        "eval.ages": [30, 60],
    }
    flat.update(overrides)
    return flat


@pytest.fixture(scope="session")
def tiny_population():
    """População sintética 32x32 com 12 sujeitos (gerada uma vez)."""
    return generate_population(tiny_spec())


@pytest.fixture
def tiny_model(tiny_population):
    """Modelo condicional pequeno inicializado com a média de 4 sujeitos."""
    stats = PopulationStats.from_records(tiny_population.records())
    model = AtlasModel(tiny_model_config(), stats, seed=0, dtype=np.float64)
    model.init_template(tiny_population.subjects, np.random.default_rng(0))
    return model


# ============================================
# Reset de estado global entre testes
# ============================================
@pytest.fixture(autouse=True)
def reset_viewer_state():
    """Limpa rate limiter e cache de modelo do visualizador."""
    from app.middleware import render_limiter
    from app.routers.templates import clear_cache

    render_limiter.requests.clear()
    yield
    render_limiter.requests.clear()
    clear_cache()
