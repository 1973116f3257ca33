"""
Gerador de populações sintéticas de "anatomia que envelhece".

Rótulos (C = 5):
    0 fundo (inclui substância branca sem rótulo)
    1 córtex (anel)
    2 ventrículo (elipse central; cresce com a idade)
    3 hipocampo (dois blobs; encolhe com a idade)
    4 estrutura de linha média (barra)

Cada sujeito recebe uma deformação difeomórfica suave aleatória
(velocidade de baixa resolução, interpolada, suavizada e integrada).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from app.config import AGE_RANGE, DESK_GRID_2D, INTEGRATION_STEPS, LABEL_NAMES, N_LABELS, SEX_VOCAB
from app.services import grid_field
from app.services.attributes import AttributeRecord
from app.services.exceptions import ConfigError, SpecRejectedError
from app.services.grid_field import Grid, LabelMap, VectorField, Volume

logger = logging.getLogger(__name__)

# Classe interna de intensidade: substância branca (vira rótulo 0)
_WHITE_MATTER = N_LABELS

# Idade de referência das leis de raio
_REFERENCE_AGE = 50.0


class PopulationSpec(BaseModel):
    """
    Especificação da população sintética.

    Raios e posições em unidades normalizadas do grid ([-1, 1] por eixo).
    """

    model_config = ConfigDict(extra="forbid")

    n_subjects: int = Field(200, ge=1)
    grid_dims: Tuple[int, ...] = DESK_GRID_2D
    age_range: Tuple[float, float] = AGE_RANGE
    sex_ratio: float = Field(0.5, ge=0, le=1)     # fração F
    female_scale: float = Field(0.95, gt=0)
    extras: Dict[str, Tuple[str, ...]] = Field(default_factory=dict)

    brain_radius: float = Field(0.78, gt=0)
    cortex_thickness: float = Field(0.10, gt=0)
    ventricle_base: float = Field(0.12, gt=0)
    ventricle_slope: float = Field(0.001, gt=0)      # por ano
    hippocampus_base: float = Field(0.10, gt=0)
    hippocampus_slope: float = Field(-0.0005, lt=0)  # por ano
    hippocampus_offset: Tuple[float, float] = (0.22, 0.34)
    midline_halfwidth: float = Field(0.03, gt=0)
    midline_span: Tuple[float, float] = (-0.60, -0.30)
    shape_noise: float = Field(0.04, ge=0)

    deform_amplitude: float = Field(1.5, ge=0)     # voxels, norma máxima da velocidade
    deform_control: int = Field(8, ge=2)           # pontos de controle por eixo
    deform_smoothing: float = Field(1.0, ge=0)

    intensities: Tuple[float, ...] = (0.0, 0.55, 0.15, 0.6, 0.9, 0.8)  # por classe, WM por último
    intensity_std: float = Field(0.02, ge=0)
    noise_std: float = Field(0.03, ge=0)
    blur_sigma: float = Field(0.5, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "PopulationSpec":
        if len(self.grid_dims) not in (2, 3):
            raise ValueError(f"grid_dims precisa de 2 ou 3 eixos: {self.grid_dims}")
        lo, hi = self.age_range
        if not hi > lo:
            raise ValueError(f"Faixa de idade inválida: {self.age_range}")
        if len(self.intensities) != N_LABELS + 1:
            raise ValueError(f"intensities precisa de {N_LABELS + 1} valores")
        return self

    @property
    def ndim(self) -> int:
        return len(self.grid_dims)

    def ventricle_radius(self, age: float) -> float:
        return self.ventricle_base + self.ventricle_slope * (age - _REFERENCE_AGE)

    def hippocampus_radius(self, age: float) -> float:
        return self.hippocampus_base + self.hippocampus_slope * (age - _REFERENCE_AGE)

    def sex_scale(self, sex: str) -> float:
        return self.female_scale if sex == "F" else 1.0


@dataclass
class Subject:
    """Par imagem/rótulos com atributos e verdade de referência."""

    id: str
    attributes: AttributeRecord
    image: Volume
    labels: LabelMap
    volumes: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)
    velocity: Optional[VectorField] = None  # só no gerador de laço fechado

    def check_volumes(self) -> bool:
        return bool(np.array_equal(self.volumes, self.labels.counts()))


@dataclass
class Dataset:
    subjects: List[Subject]
    spec: Optional[PopulationSpec] = None

    def __len__(self) -> int:
        return len(self.subjects)

    def __getitem__(self, i: int) -> Subject:
        return self.subjects[i]

    def __iter__(self):
        return iter(self.subjects)

    @property
    def n_labels(self) -> int:
        return self.subjects[0].labels.n_labels if self.subjects else N_LABELS

    def records(self) -> List[AttributeRecord]:
        return [s.attributes for s in self.subjects]

    def by_id(self, subject_id: str) -> Subject:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(subject_id)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        wanted = set(ids)
        return Dataset([s for s in self.subjects if s.id in wanted], self.spec)


# =============================================================================
# Geometria
# =============================================================================

def _normalized_coords(dims: Tuple[int, ...]) -> np.ndarray:
    idx = grid_field.identity_grid(dims)
    center = np.array([(n - 1) / 2.0 for n in dims]).reshape((-1,) + (1,) * len(dims))
    half = np.array([n / 2.0 for n in dims]).reshape((-1,) + (1,) * len(dims))
    return (idx - center) / half


def check_spec(spec: PopulationSpec) -> None:
    """
    Rejeita especificações cujas estruturas saem do grid.

    Raises:
        SpecRejectedError
    """
    lo, hi = spec.age_range
    worst_noise = 1.0 + 3.0 * spec.shape_noise
    s_max = max(spec.female_scale, 1.0) * worst_noise

    for n in spec.grid_dims:
        if n < grid_field.MIN_GRID_DIM:
            raise SpecRejectedError(f"Dimensão de grid {n} menor que {grid_field.MIN_GRID_DIM}")
        extent = spec.brain_radius * s_max * (n / 2.0) + spec.deform_amplitude + 1.0
        if extent >= n / 2.0:
            raise SpecRejectedError(
                f"Cérebro com raio {extent:.1f} voxels não cabe em eixo de {n} voxels"
            )

    if spec.ventricle_radius(lo) <= 0 or spec.hippocampus_radius(hi) <= 0:
        raise SpecRejectedError("Lei de raio gera raio não positivo dentro da faixa de idade")

    inner = spec.brain_radius - spec.cortex_thickness
    hippo_reach = float(np.hypot(*spec.hippocampus_offset)) + spec.hippocampus_radius(lo) * worst_noise
    if hippo_reach >= inner or 1.2 * spec.ventricle_radius(hi) * worst_noise >= inner:
        raise SpecRejectedError("Estruturas internas excedem o interior do córtex")


def _shape_params(spec: PopulationSpec, age: float, sex: str, rng: np.random.Generator) -> Dict[str, float]:
    s = spec.sex_scale(sex)

    def jitter() -> float:
        if spec.shape_noise == 0:
            return 1.0
        return float(np.clip(1.0 + rng.normal(0.0, spec.shape_noise), 0.5, 1.5))

    return {
        "scale": s,
        "brain": spec.brain_radius * s * jitter(),
        "cortex": spec.cortex_thickness * s,
        "ventricle": spec.ventricle_radius(age) * s * jitter(),
        "hippocampus": spec.hippocampus_radius(age) * s * jitter(),
        "midline": spec.midline_halfwidth * s,
    }


def rasterize(spec: PopulationSpec, params: Dict[str, float]) -> np.ndarray:
    """Mapa de classes de intensidade (0..5, 5 = substância branca) no espaço canônico."""
    r = _normalized_coords(spec.grid_dims)
    D = spec.ndim
    rho = np.sqrt(np.sum(r ** 2, axis=0))
    s = params["scale"]
    out = np.zeros(spec.grid_dims, dtype=np.int32)

    out[rho <= params["brain"]] = _WHITE_MATTER
    out[(rho <= params["brain"]) & (rho > params["brain"] - params["cortex"])] = 1

    lo, hi = spec.midline_span
    bar = (np.abs(r[1]) <= params["midline"]) & (r[0] >= lo * s) & (r[0] <= hi * s)
    if D == 3:
        bar &= np.abs(r[2]) <= 0.35 * s
    out[bar] = 4

    rv = params["ventricle"]
    semi = (1.2 * rv, 0.7 * rv, 0.9 * rv)[:D]
    out[np.sum([(r[d] / semi[d]) ** 2 for d in range(D)], axis=0) <= 1.0] = 2

    rh = params["hippocampus"]
    oy, ox = spec.hippocampus_offset
    for side in (-1.0, 1.0):
        center = [oy * s, side * ox * s] + [0.0] * (D - 2)
        dist2 = np.sum([(r[d] - center[d]) ** 2 for d in range(D)], axis=0)
        out[dist2 <= rh ** 2] = 3
    return out


def random_velocity(spec: PopulationSpec, rng: np.random.Generator) -> np.ndarray:
    """Velocidade suave (D, *dims) com norma máxima = deform_amplitude."""
    D = spec.ndim
    if spec.deform_amplitude == 0:
        return np.zeros((D,) + spec.grid_dims)
    coarse = rng.normal(0.0, 1.0, size=(D,) + (spec.deform_control,) * D)
    factors = [n / spec.deform_control for n in spec.grid_dims]
    v = np.stack([ndimage.zoom(coarse[d], factors, order=3, mode="nearest") for d in range(D)])
    v = v[(slice(None),) + tuple(slice(0, n) for n in spec.grid_dims)]
    if spec.deform_smoothing > 0:
        v = np.stack([ndimage.gaussian_filter(v[d], spec.deform_smoothing, mode="nearest") for d in range(D)])
    peak = float(np.sqrt(np.sum(v ** 2, axis=0)).max())
    if peak > 0:
        v *= spec.deform_amplitude / peak
    return v


def _render_image(spec: PopulationSpec, classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    means = np.asarray(spec.intensities, dtype=np.float64)
    if spec.intensity_std > 0:
        means = means + rng.normal(0.0, spec.intensity_std, size=means.shape) * (means > 0)
    img = means[classes]
    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="nearest")
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return img[None].astype(np.float32)


# =============================================================================
# Geração
# =============================================================================

def _subject_rng(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _draw_attributes(spec: PopulationSpec, rng: np.random.Generator) -> AttributeRecord:
    lo, hi = spec.age_range
    age = float(rng.uniform(lo, hi))
    sex = SEX_VOCAB[0] if rng.random() < spec.sex_ratio else SEX_VOCAB[1]
    extras = {name: str(vocab[int(rng.integers(len(vocab)))]) for name, vocab in sorted(spec.extras.items())}
    return AttributeRecord.create(age, sex, extras)


def generate_subject(spec: PopulationSpec, rng: np.random.Generator, subject_id: str,
                     record: Optional[AttributeRecord] = None) -> Subject:
    """Um sujeito; atributos sorteados do rng se `record` não for dado."""
    if record is None:
        record = _draw_attributes(spec, rng)
    params = _shape_params(spec, record.age, record.sex, rng)
    canonical = rasterize(spec, params)

    grid = Grid(spec.grid_dims)
    v = random_velocity(spec, rng)
    u = grid_field.integrate_velocity_array(v, INTEGRATION_STEPS)
    classes = grid_field.warp_labels(LabelMap(grid, canonical, N_LABELS + 1), VectorField(grid, u)).labels

    labels = np.where(classes == _WHITE_MATTER, 0, classes).astype(np.int32)
    label_map = LabelMap(grid, labels, N_LABELS)
    image = Volume(grid, _render_image(spec, classes, rng))

    metadata = {k: float(v_) for k, v_ in params.items()}
    metadata["min_jacobian"] = float(grid_field.jacobian_determinant_array(u).min())
    return Subject(subject_id, record, image, label_map, label_map.counts(), metadata)


def generate_population(spec: PopulationSpec, workers: int = 1) -> Dataset:
    """
    Gera `spec.n_subjects` sujeitos com fluxos de RNG derivados por sujeito.

    Raises:
        SpecRejectedError: estruturas excedem o grid
    """
    check_spec(spec)
    rngs = _subject_rng(spec.seed, spec.n_subjects)
    ids = [f"sub-{i:04d}" for i in range(spec.n_subjects)]

    def build(i: int) -> Subject:
        return generate_subject(spec, rngs[i], ids[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            subjects = list(pool.map(build, range(spec.n_subjects)))
    else:
        subjects = [build(i) for i in range(spec.n_subjects)]

    logger.info(f"População sintética gerada: {len(subjects)} sujeitos, grid {spec.grid_dims}")
    return Dataset(subjects, spec)


def generate_from_template(
    template_image: Volume,
    template_labels: LabelMap,
    n: int,
    amplitude: float = 1.5,
    seed: int = 0,
    noise_std: float = 0.0,
    age_range: Tuple[float, float] = AGE_RANGE,
) -> Dataset:
    """
    População de laço fechado: cada sujeito é o template deformado por exp(v_i).

    A velocidade verdadeira fica em `Subject.velocity`.
    """
    if n < 1:
        raise ConfigError("generate_from_template requer n >= 1")
    grid = template_image.grid
    spec = PopulationSpec(
        n_subjects=n, grid_dims=grid.dims, age_range=age_range,
        deform_amplitude=amplitude, noise_std=noise_std, seed=seed,
    )
    subjects = []
    for i, rng in enumerate(_subject_rng(seed, n)):
        record = _draw_attributes(spec, rng)
        v = random_velocity(spec, rng)
        u = VectorField(grid, grid_field.integrate_velocity_array(v, INTEGRATION_STEPS))
        labels = grid_field.warp_labels(template_labels, u)
        img = grid_field.warp_array(template_image.data.astype(np.float64), u.data)
        if noise_std > 0:
            img = img + rng.normal(0.0, noise_std, size=img.shape)
        subjects.append(Subject(
            f"sub-{i:04d}", record, Volume(grid, img.astype(np.float32)), labels, labels.counts(),
            {"closed_loop": 1.0}, VectorField(grid, v, "velocity"),
        ))
    return Dataset(subjects, None)


# =============================================================================
# Split
# =============================================================================

SPLIT_NAMES = ("train", "val", "test")


def split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Dict[str, Dataset]:
    """
    Partição por sujeito em train/val/test.

    val e test recebem round(n·f); train fica com o restante.

    Raises:
        ConfigError: frações negativas ou que não somam 1
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"Frações de split inválidas: {fractions}")

    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_val = min(n_val, n)
    n_test = min(n_test, n - n_val)
    parts = {
        "val": perm[:n_val],
        "test": perm[n_val: n_val + n_test],
        "train": perm[n_val + n_test:],
    }
    return {
        name: Dataset([dataset[int(i)] for i in sorted(parts[name])], dataset.spec)
        for name in SPLIT_NAMES
    }


def structure_names() -> List[str]:
    return [LABEL_NAMES[c] for c in range(N_LABELS)]
