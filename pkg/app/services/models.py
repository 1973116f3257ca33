"""
Sub-redes do atlas condicional.

- TemplateDecoder: atributos -> (intensidade, probabilidades de rótulo)
- UnconditionalTemplate: mesmos tensores como parâmetros diretos por voxel
- RegistrationNet: UNet (template, imagem) -> campo de velocidade
- AtlasModel: composição das duas sub-redes mais a integração do campo

Os forwards constroem nós em um Tape; os helpers de inferência
(`template_for`, `predict_velocity`) usam um Tape descartável.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from app.config import (
    DECODER_BASE_FEATURES,
    DECODER_UPSAMPLE_STAGES,
    DESK_GRID_2D,
    FINAL_LAYER_INIT_STD,
    INTEGRATION_STEPS,
    N_LABELS,
    SEG_INIT_SMOOTHING,
    UNET_DECODER_FEATURES,
    UNET_ENCODER_FEATURES,
)
from app.services import autodiff as ad
from app.services.attributes import AttributeRecord, PopulationStats, encode_attributes
from app.services.autodiff import Node, Parameter, Tape
from app.services.checkpoint import (
    CheckpointState,
    load_checkpoint,
    restore_parameters,
    save_checkpoint,
)
from app.services.exceptions import CheckpointError, ConfigError, DatasetError, GridMismatchError
from app.services.grid_field import Grid, LabelMap, VectorField, Volume

logger = logging.getLogger(__name__)

Variant = Literal["cond", "cond-no-seg", "uncond", "uncond-no-seg"]

_INIT_SPEC = re.compile(r"^(mean-of-(?P<n>\d+)|single-subject|zeros)$")


def parse_init_spec(spec: str) -> Tuple[str, Optional[int]]:
    """Converte "mean-of-N" em ("mean-of", N); "single-subject" e "zeros" vêm sem N."""
    match = _INIT_SPEC.match(spec)
    if not match:
        raise ConfigError(f"init_spec inválido: {spec}")
    n = match.group("n")
    if n is not None:
        if int(n) < 1:
            raise ConfigError(f"init_spec inválido: {spec}")
        return "mean-of", int(n)
    return spec, None


class ModelConfig(BaseModel):
    """Hiperparâmetros de arquitetura e variante."""

    model_config = ConfigDict(extra="forbid")

    grid_dims: Tuple[int, ...] = DESK_GRID_2D
    n_labels: int = N_LABELS
    upsample_stages: int = DECODER_UPSAMPLE_STAGES
    base_features: int = DECODER_BASE_FEATURES
    unet_encoder: Tuple[int, ...] = UNET_ENCODER_FEATURES
    unet_decoder: Tuple[int, ...] = UNET_DECODER_FEATURES
    variant: Variant = "cond"
    init_spec: str = "mean-of-100"
    integration_steps: int = INTEGRATION_STEPS
    final_init_std: float = FINAL_LAYER_INIT_STD
    seg_smoothing: float = SEG_INIT_SMOOTHING

    @field_validator("init_spec")
    @classmethod
    def _check_init_spec(cls, v: str) -> str:
        match = _INIT_SPEC.match(v)
        if not match or (match.group("n") is not None and int(match.group("n")) < 1):
            raise ValueError(f"init_spec inválido: {v}")
        return v

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if len(self.grid_dims) not in (2, 3):
            raise ValueError(f"grid_dims precisa de 2 ou 3 eixos: {self.grid_dims}")
        if self.n_labels < 2:
            raise ValueError("n_labels deve ser >= 2")
        if self.integration_steps < 1:
            raise ValueError("integration_steps deve ser >= 1")
        if len(self.unet_decoder) < len(self.unet_encoder):
            raise ValueError("unet_decoder precisa de ao menos um nível por nível do encoder")
        pool = 2 ** len(self.unet_encoder)
        stages = 2 ** self.upsample_stages
        for n in self.grid_dims:
            if n % pool:
                raise ValueError(f"Dimensão {n} não divisível por {pool} (níveis da UNet)")
            if self.conditional and n % stages:
                raise ValueError(f"Dimensão {n} não divisível por {stages} (estágios do decoder)")
        if not 0.0 <= self.seg_smoothing < 1.0:
            raise ValueError("seg_smoothing deve estar em [0, 1)")
        if self.final_init_std < 0:
            raise ValueError("final_init_std deve ser >= 0")
        return self

    @property
    def ndim(self) -> int:
        return len(self.grid_dims)

    @property
    def conditional(self) -> bool:
        return self.variant.startswith("cond")

    @property
    def with_seg(self) -> bool:
        return not self.variant.endswith("no-seg")

    def init_parts(self) -> Tuple[str, Optional[int]]:
        return parse_init_spec(self.init_spec)


# =============================================================================
# Tipos de saída
# =============================================================================

@dataclass
class TemplateNodes:
    """Template no grafo: intensidade (1, *dims) e probabilidades (C, *dims) ou None."""

    intensity: Node
    seg: Optional[Node]


@dataclass
class Template:
    intensity: Volume
    seg: Optional[Volume]

    def hard_labels(self) -> LabelMap:
        """Argmax das probabilidades (empate -> menor rótulo)."""
        if self.seg is None:
            raise ConfigError("Template sem mapa de rótulos (variante no-seg)")
        labels = np.argmax(self.seg.data, axis=0).astype(np.int32)
        return LabelMap(self.seg.grid, labels, self.seg.channels)


@dataclass
class ModelOutputs:
    velocity: Node
    template: TemplateNodes
    displacement: Node


# =============================================================================
# Inicialização de pesos
# =============================================================================

class _ParamFactory:
    """Cria parâmetros em ordem determinística a partir de um gerador."""

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: List[Parameter] = []

    def _add(self, name: str, value: np.ndarray, trainable: bool = True) -> Parameter:
        p = Parameter(name, np.asarray(value, dtype=self.dtype), trainable=trainable)
        self.params.append(p)
        return p

    def conv(self, name: str, c_in: int, c_out: int, ndim: int,
             std: Optional[float] = None) -> Tuple[Parameter, Parameter]:
        shape = (c_out, c_in) + (3,) * ndim
        if std is None:
            std = np.sqrt(2.0 / (c_in * 3 ** ndim))  # He
        w = self.rng.normal(0.0, 1.0, size=shape) * std
        return self._add(f"{name}.w", w), self._add(f"{name}.b", np.zeros(c_out))

    def dense(self, name: str, n_in: int, n_out: int) -> Tuple[Parameter, Parameter]:
        w = self.rng.normal(0.0, 1.0, size=(n_out, n_in)) * np.sqrt(2.0 / n_in)
        return self._add(f"{name}.w", w), self._add(f"{name}.b", np.zeros(n_out))

    def buffer(self, name: str, value: np.ndarray) -> Parameter:
        return self._add(name, value, trainable=False)


def _conv(tape: Tape, x: Node, layer: Tuple[Parameter, Parameter]) -> Node:
    return ad.conv(x, tape.param(layer[0]), tape.param(layer[1]))


# =============================================================================
# Template
# =============================================================================

class TemplateDecoder:
    """
    Decoder condicional: dense -> reshape -> U x [conv3 + relu, upsample2] -> cabeças.

    A cabeça de intensidade soma o volume fixo b0; a de segmentação soma
    o volume fixo de logits s0 e aplica softmax nos canais.
    """

    def __init__(self, config: ModelConfig, n_attributes: int, factory: _ParamFactory):
        self.config = config
        D, F0, U = config.ndim, config.base_features, config.upsample_stages
        self.coarse = tuple(n // 2 ** U for n in config.grid_dims)

        self.dense = factory.dense("decoder.dense", n_attributes, F0 * int(np.prod(self.coarse)))
        self.blocks = [factory.conv(f"decoder.conv{i}", F0, F0, D) for i in range(U)]
        self.img_head = factory.conv("decoder.img_head", F0, 1, D, std=config.final_init_std)
        self.b0 = factory.buffer("template.b0", np.zeros((1,) + config.grid_dims))

        self.seg_head = None
        self.s0 = None
        if config.with_seg:
            self.seg_head = factory.conv("decoder.seg_head", F0, config.n_labels, D, std=config.final_init_std)
            self.s0 = factory.buffer("template.s0", np.zeros((config.n_labels,) + config.grid_dims))

    def forward(self, tape: Tape, attributes: Optional[np.ndarray]) -> TemplateNodes:
        if attributes is None:
            raise ConfigError("Template condicional requer vetor de atributos")
        a = tape.constant(np.asarray(attributes, dtype=self.b0.value.dtype))
        h = ad.dense(a, tape.param(self.dense[0]), tape.param(self.dense[1]))
        h = ad.reshape(h, (self.config.base_features,) + self.coarse)
        for block in self.blocks:
            h = ad.upsample2(ad.relu(_conv(tape, h, block)))

        intensity = ad.add(_conv(tape, h, self.img_head), tape.constant(self.b0.value))
        seg = None
        if self.seg_head is not None:
            seg = ad.softmax(ad.add(_conv(tape, h, self.seg_head), tape.constant(self.s0.value)))
        return TemplateNodes(intensity, seg)

    def set_init(self, intensity: np.ndarray, seg_logits: Optional[np.ndarray]) -> None:
        self.b0.value[...] = intensity
        if self.s0 is not None and seg_logits is not None:
            self.s0.value[...] = seg_logits


class UnconditionalTemplate:
    """Intensidade e logits diretamente aprendíveis; os atributos são ignorados."""

    def __init__(self, config: ModelConfig, factory: _ParamFactory):
        self.intensity = factory._add("template.intensity", np.zeros((1,) + config.grid_dims))
        self.seg_logits = None
        if config.with_seg:
            self.seg_logits = factory._add("template.seg_logits", np.zeros((config.n_labels,) + config.grid_dims))

    def forward(self, tape: Tape, attributes: Optional[np.ndarray] = None) -> TemplateNodes:
        seg = ad.softmax(tape.param(self.seg_logits)) if self.seg_logits is not None else None
        return TemplateNodes(tape.param(self.intensity), seg)

    def set_init(self, intensity: np.ndarray, seg_logits: Optional[np.ndarray]) -> None:
        self.intensity.value[...] = intensity
        if self.seg_logits is not None and seg_logits is not None:
            self.seg_logits.value[...] = seg_logits


# =============================================================================
# Registro
# =============================================================================

class RegistrationNet:
    """
    UNet no estilo VoxelMorph.

    Encoder: um conv3 + relu por nível seguido de max-pool 2. Decoder: os
    primeiros níveis (um por nível do encoder) fazem conv3 + relu, upsample2
    e concatenam o skip correspondente; os restantes refinam na resolução
    cheia. Um conv final gera as D componentes da velocidade.
    """

    def __init__(self, config: ModelConfig, factory: _ParamFactory):
        D = config.ndim
        enc, dec = config.unet_encoder, config.unet_decoder
        self.encoder = []
        c_in = 2
        for i, c in enumerate(enc):
            self.encoder.append(factory.conv(f"unet.enc{i}", c_in, c, D))
            c_in = c

        self.decoder = []
        for i, c in enumerate(dec):
            self.decoder.append(factory.conv(f"unet.dec{i}", c_in, c, D))
            c_in = c
            if i < len(enc):
                c_in += enc[len(enc) - 1 - i]  # concat do skip
        self.flow = factory.conv("unet.flow", c_in, D, D, std=config.final_init_std)
        self.n_levels = len(enc)

    def forward(self, tape: Tape, t_img: Node, x: Node) -> Node:
        if t_img.shape != x.shape or t_img.shape[0] != 1:
            raise GridMismatchError(f"Template {t_img.shape} e imagem {x.shape} em grids diferentes")
        h = ad.concat([t_img, x])
        skips = []
        for layer in self.encoder:
            h = ad.relu(_conv(tape, h, layer))
            skips.append(h)
            h = ad.max_pool2(h)

        for i, layer in enumerate(self.decoder):
            h = ad.relu(_conv(tape, h, layer))
            if i < self.n_levels:
                h = ad.concat([ad.upsample2(h), skips[self.n_levels - 1 - i]])
        return _conv(tape, h, self.flow)


# =============================================================================
# Modelo completo
# =============================================================================

class AtlasModel:
    """
    Template (condicional ou não) + rede de registro.

    Uso:
        model = AtlasModel(config, stats, seed=0)
        model.init_template(train_subjects, rng)
        tape = Tape()
        out = model.model_forward(tape, x_node, model.encode(record))
    """

    def __init__(self, config: ModelConfig, stats: PopulationStats, seed: int = 0, dtype=np.float32):
        self.config = config
        self.stats = stats
        self.dtype = np.dtype(dtype)
        self.grid = Grid(config.grid_dims)
        factory = _ParamFactory(np.random.default_rng(seed), self.dtype)
        if config.conditional:
            self.template = TemplateDecoder(config, stats.vector_size, factory)
        else:
            self.template = UnconditionalTemplate(config, factory)
        self.registration = RegistrationNet(config, factory)
        self._all = factory.params

    # ------------------------------------------------------------------
    # Parâmetros
    # ------------------------------------------------------------------

    def parameters(self) -> List[Parameter]:
        """Parâmetros treináveis (os buffers b0/s0 ficam de fora)."""
        return [p for p in self._all if p.trainable]

    def state(self) -> List[Parameter]:
        """Todos os tensores persistidos em checkpoint."""
        return list(self._all)

    def parameter(self, name: str) -> Parameter:
        for p in self._all:
            if p.name == name:
                return p
        raise KeyError(name)

    # ------------------------------------------------------------------
    # Forwards
    # ------------------------------------------------------------------

    def encode(self, record: Optional[AttributeRecord], strict: bool = True) -> Optional[np.ndarray]:
        if record is None or not self.config.conditional:
            return None
        return encode_attributes(record, self.stats, strict=strict, dtype=self.dtype)

    def template_forward(self, tape: Tape, attributes: Optional[np.ndarray]) -> TemplateNodes:
        return self.template.forward(tape, attributes)

    def registration_forward(self, tape: Tape, t_img: Node, x: Node) -> Node:
        return self.registration.forward(tape, t_img, x)

    def model_forward(self, tape: Tape, x: Node, attributes: Optional[np.ndarray]) -> ModelOutputs:
        template = self.template_forward(tape, attributes)
        v = self.registration_forward(tape, template.intensity, x)
        u = ad.integrate_velocity(v, self.config.integration_steps)
        return ModelOutputs(v, template, u)

    # ------------------------------------------------------------------
    # Inferência
    # ------------------------------------------------------------------

    def template_for(self, record: Optional[AttributeRecord], strict: bool = False) -> Template:
        nodes = self.template_forward(Tape(), self.encode(record, strict=strict))
        seg = Volume(self.grid, nodes.seg.value) if nodes.seg is not None else None
        return Template(Volume(self.grid, nodes.intensity.value), seg)

    def predict_velocity(self, image: Volume, record: Optional[AttributeRecord],
                         template: Optional[Template] = None) -> VectorField:
        """Velocidade que leva o template dos atributos até a imagem."""
        if image.grid.dims != self.grid.dims:
            raise GridMismatchError(f"Imagem em grid {image.grid.dims}, modelo em {self.grid.dims}")
        tape = Tape()
        if template is None:
            t_img = self.template_forward(tape, self.encode(record, strict=False)).intensity
        else:
            t_img = tape.constant(template.intensity.data.astype(self.dtype))
        x = tape.constant(image.data.astype(self.dtype))
        v = self.registration_forward(tape, t_img, x)
        return VectorField(image.grid, v.value, "velocity")

    # ------------------------------------------------------------------
    # Inicialização do template
    # ------------------------------------------------------------------

    def init_template(self, subjects: Sequence[Any], rng: np.random.Generator,
                      init_spec: Optional[str] = None) -> None:
        """
        Define b0/s0 (ou os tensores incondicionais) a partir dos sujeitos.

        Args:
            subjects: Objetos com `.image` (Volume) e `.labels` (LabelMap)
            rng: Gerador usado no sorteio dos sujeitos
            init_spec: "mean-of-N", "single-subject" ou "zeros" (padrão: do config)

        Raises:
            DatasetError: lista de sujeitos vazia
        """
        spec = init_spec or self.config.init_spec
        kind, n = parse_init_spec(spec)
        C = self.config.n_labels

        if kind == "zeros":
            intensity = np.zeros((1,) + self.config.grid_dims)
            logits = np.zeros((C,) + self.config.grid_dims)
        else:
            if not subjects:
                raise DatasetError("Inicialização do template sem sujeitos")
            count = 1 if kind == "single-subject" else n
            if count > len(subjects):
                logger.warning(f"init {spec}: apenas {len(subjects)} sujeitos disponíveis; usando todos")
                count = len(subjects)
            chosen = np.sort(rng.choice(len(subjects), size=count, replace=False))
            intensity, probs = _mean_image_and_labels(subjects, chosen, C)
            eps = self.config.seg_smoothing
            logits = np.log((1.0 - eps) * probs + eps / C + 1e-12)
            logger.info(f"Template inicializado com {spec} ({count} sujeitos)")

        self.template.set_init(intensity.astype(self.dtype), logits.astype(self.dtype))

    # ------------------------------------------------------------------
    # Persistência
    # ------------------------------------------------------------------

    def checkpoint_config(self) -> Dict[str, Any]:
        return {"model": self.config.model_dump(mode="json"), "stats": self.stats.to_dict()}

    def save(self, path: Path, rng: Optional[np.random.Generator] = None,
             extra: Optional[Dict[str, Any]] = None) -> None:
        save_checkpoint(path, self.state(), rng, self.checkpoint_config(), extra)


def _mean_image_and_labels(subjects: Sequence[Any], indices: np.ndarray, n_labels: int):
    intensity = None
    probs = None
    for i in indices:
        s = subjects[int(i)]
        img = s.image.data.astype(np.float64)
        oh = s.labels.one_hot(np.float64)
        intensity = img if intensity is None else intensity + img
        probs = oh if probs is None else probs + oh
    k = float(len(indices))
    return intensity / k, probs / k


def load_model(path: Path, dtype=np.float32) -> Tuple[AtlasModel, CheckpointState]:
    """
    Reconstrói um AtlasModel a partir do checkpoint.

    Raises:
        CheckpointError: header sem config de modelo ou tensores incompatíveis
    """
    state = load_checkpoint(path)
    try:
        config = ModelConfig(**state.config["model"])
        stats = PopulationStats.from_dict(state.config["stats"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Config de modelo inválida no checkpoint ({e.__class__.__name__})", path)
    model = AtlasModel(config, stats, seed=0, dtype=dtype)
    restore_parameters(model.state(), state, path)
    return model, state
