"""
Configuração de execução: modelos pydantic por seção e o parser do
formato texto `chave = valor`.

Formato:
    # comentário
    include = base.cfg            # relativo ao arquivo que inclui
    seed = 3
    model.variant = "cond-no-seg"
    model.grid_dims = 64, 64      # lista sem colchetes também vale
    loss.lambda_img = 20

Chaves posteriores sobrescrevem as anteriores; `--set` e as flags da CLI
sobrescrevem o arquivo.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.config import (
    BATCH_SIZE,
    CHECKPOINT_EVERY,
    CONVERGENCE_MIN_DELTA,
    CONVERGENCE_WINDOW,
    DEFAULT_OUTPUT_DIR,
    EPOCHS,
    LEARNING_RATE,
    TREND_AGES,
    TREND_BANDWIDTH,
    VAL_EVERY,
)
from app.services.centrality import AnchorKind, CentralityMode
from app.services.exceptions import ConfigError
from app.services.file_utils import atomic_text_write
from app.services.losses import LossWeights
from app.services.models import ModelConfig
from app.services.synthdata import PopulationSpec

logger = logging.getLogger(__name__)

FROZEN_CONFIG_NAME = "config.frozen.cfg"
_INCLUDE_KEY = "include"


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = None
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "DataSection":
        if any(f < 0 for f in self.split_fractions) or abs(sum(self.split_fractions) - 1.0) > 1e-6:
            raise ValueError(f"split_fractions precisa somar 1: {self.split_fractions}")
        return self


class TrainSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(EPOCHS, ge=1)
    batch_size: int = Field(BATCH_SIZE, ge=1)
    lr: float = Field(LEARNING_RATE, gt=0)
    steps_per_epoch: Optional[int] = Field(None, ge=1)   # None: ceil(n_train / B)
    max_steps: Optional[int] = Field(None, ge=1)
    centrality_mode: CentralityMode = "conditional"
    anchor_kind: AnchorKind = "joint"
    centrality_reweight: bool = False
    checkpoint_every: int = Field(CHECKPOINT_EVERY, ge=1)
    val_every: int = Field(VAL_EVERY, ge=1)
    convergence_window: int = Field(CONVERGENCE_WINDOW, ge=1)
    convergence_min_delta: float = Field(CONVERGENCE_MIN_DELTA, ge=0)
    val_subjects: int = Field(20, ge=1)                  # sujeitos usados na validação


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: str = "test"
    ages: Tuple[float, ...] = tuple(float(a) for a in TREND_AGES)
    bandwidth: float = Field(TREND_BANDWIDTH, gt=0)
    sex: Tuple[str, ...] = ("F", "M")


class RunConfig(BaseModel):
    """Configuração completa de um comando."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    out: str = str(DEFAULT_OUTPUT_DIR)
    threads: int = Field(1, ge=1)
    float64: bool = False
    name: str = "run"

    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    train: TrainSection = Field(default_factory=TrainSection)
    population: PopulationSpec = Field(default_factory=PopulationSpec)
    data: DataSection = Field(default_factory=DataSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    @model_validator(mode="after")
    def _check_grid(self) -> "RunConfig":
        if tuple(self.model.grid_dims) != tuple(self.population.grid_dims):
            raise ValueError(
                f"model.grid_dims {self.model.grid_dims} difere de population.grid_dims "
                f"{self.population.grid_dims}"
            )
        return self

    @property
    def dtype(self) -> str:
        return "float64" if self.float64 else "float32"

    def freeze(self) -> str:
        """Texto `chave = valor` totalmente resolvido, chaves ordenadas."""
        flat = _flatten(self.model_dump(mode="json"))
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(flat.items()))

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Cópia revalidada com chaves pontuadas substituídas."""
        flat = _flatten(self.model_dump(mode="json"))
        flat.update(overrides)
        return build_run_config(flat)

    def write_frozen(self, run_dir: Path) -> Path:
        path = Path(run_dir) / FROZEN_CONFIG_NAME
        atomic_text_write(path, self.freeze())
        return path


# =============================================================================
# Parser
# =============================================================================

def parse_value(raw: str) -> Any:
    """JSON quando possível; `a, b` vira lista; o resto é string."""
    text = raw.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _strip_comment(line: str) -> str:
    # '#' dentro de aspas é preservado
    in_quotes = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_quotes = not in_quotes
        elif ch == "#" and not in_quotes:
            return line[:i]
    return line


def read_config_file(path: Path, _stack: Optional[List[Path]] = None) -> Dict[str, Any]:
    """
    Lê o arquivo e seus includes em um dict plano de chaves pontuadas.

    Raises:
        ConfigError: arquivo ausente, linha sem '=' ou ciclo de include
    """
    path = Path(path).resolve()
    stack = list(_stack or [])
    if path in stack:
        chain = " -> ".join(str(p) for p in stack + [path])
        raise ConfigError(f"Ciclo de include: {chain}")
    if not path.is_file():
        raise ConfigError(f"Arquivo de configuração não encontrado: {path}")
    stack.append(path)

    values: Dict[str, Any] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = _strip_comment(line).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: linha sem '=': {line}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: chave vazia")
        if key == _INCLUDE_KEY:
            target = parse_value(raw)
            values.update(read_config_file(path.parent / str(target), stack))
            continue
        values[key] = parse_value(raw)
    return values


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    """Converte `--set chave=valor` em dict plano."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"Override sem '=': {item}")
        key, raw = item.split("=", 1)
        out[key.strip()] = parse_value(raw)
    return out


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Chave '{key}' conflita com valor escalar em '{part}'")
            node = child
        node[parts[-1]] = value
    return nested


def _flatten(nested: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in nested.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict) and value and key != "extras":
            flat.update(_flatten(value, full + "."))
        else:
            flat[full] = value
    return flat


def build_run_config(flat: Dict[str, Any]) -> RunConfig:
    """
    Valida o dict plano.

    `population.grid_dims` segue `model.grid_dims` quando só um dos dois
    foi informado.

    Raises:
        ConfigError: chave desconhecida ou valor inválido
    """
    flat = dict(flat)
    if "model.grid_dims" in flat and "population.grid_dims" not in flat:
        flat["population.grid_dims"] = flat["model.grid_dims"]
    elif "population.grid_dims" in flat and "model.grid_dims" not in flat:
        flat["model.grid_dims"] = flat["population.grid_dims"]
    try:
        return RunConfig(**_nest(flat))
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"Configuração inválida: {problems}") from e


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Sequence[str]] = None,
    flags: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Resolve arquivo + overrides `--set` + flags globais, nesta ordem.

    Args:
        path: Arquivo `chave = valor` (opcional)
        overrides: Itens `chave=valor` de `--set`
        flags: Flags globais já convertidas (None = não informado)
    """
    flat: Dict[str, Any] = read_config_file(path) if path else {}
    flat.update(parse_overrides(overrides or ()))
    for key, value in (flags or {}).items():
        if value is not None:
            flat[key] = value
    config = build_run_config(flat)
    logger.debug(f"Configuração resolvida: {config.model_dump(mode='json')}")
    return config
