"""Configurações da aplicação Atlas Lab."""

import os
from pathlib import Path

# Servidor (visualizador local)
HOST = "127.0.0.1"
PORT = 8000

# ============================================
# Grid e integração
# ============================================
DESK_GRID_2D = (96, 96)
SMOKE_GRID_3D = (48, 48, 48)
MIN_GRID_DIM = 4
INTEGRATION_STEPS = 7        # K do scaling-and-squaring

# ============================================
# Arquitetura
# ============================================
DECODER_BASE_FEATURES = 16   # F0
DECODER_UPSAMPLE_STAGES = 3  # U
UNET_ENCODER_FEATURES = (16, 32, 32, 32)
UNET_DECODER_FEATURES = (32, 32, 32, 32, 32, 16, 16)
FINAL_LAYER_INIT_STD = 1e-5
SEG_INIT_SMOOTHING = 0.05
N_LABELS = 5

# Rótulos do gerador sintético (C = 5)
LABEL_NAMES = {
    0: "background",
    1: "cortex",
    2: "ventricle",
    3: "hippocampus",
    4: "midline",
}

# Vocabulários de atributos
SEX_VOCAB = ("F", "M")
AGE_RANGE = (10.0, 90.0)

# ============================================
# Loss
# ============================================
LAMBDA_IMG = 20.0
LAMBDA_SEG = 0.2
LAMBDA_SMOOTH = 1.0          # λ_a
LAMBDA_CENTRAL = 0.1         # λ_c
SIGMA_KDE = 2.0
SIGMA_DENSITY = 1.0          # σ_d
DICE_EPS = 1e-5
LOG_EPS = 1e-8

# ============================================
# Treino
# ============================================
BATCH_SIZE = 3
LEARNING_RATE = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EPOCHS = 300
CONVERGENCE_WINDOW = 20      # épocas
CONVERGENCE_MIN_DELTA = 1e-3  # Dice de validação
VAL_EVERY = 5
CHECKPOINT_EVERY = 10        # épocas

# ============================================
# Avaliação
# ============================================
TREND_BANDWIDTH = 5.0        # anos
TREND_AGES = (20, 30, 40, 50, 60, 70, 80)
CI_Z = 1.96
GRADCHECK_STEP = 1e-4
GRADCHECK_COORDS = 32
GRADCHECK_TOL = 1e-4

# ============================================
# Diretórios
# ============================================
# Diretório de dados do usuário (~/.atlas_lab/)
USER_DATA_DIR = Path.home() / ".atlas_lab"
DEFAULT_OUTPUT_DIR = USER_DATA_DIR / "runs"

# Raiz de datasets: AM_DATA_DIR tem precedência
DATA_DIR_ENV = "AM_DATA_DIR"
CHECKPOINT_ENV = "AM_CHECKPOINT"

# Modo headless (sem abrir browser) para testes/automação
HEADLESS = os.getenv("ATLAS_HEADLESS", "false").lower() == "true"

# Templates Jinja2 dos gráficos SVG
TEMPLATES_DIR = Path(__file__).parent / "templates"


def get_data_root() -> Path:
    """
    Retorna a raiz de datasets.

    AM_DATA_DIR quando definido; senão ~/.atlas_lab/data.
    """
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env).expanduser()
    return USER_DATA_DIR / "data"
