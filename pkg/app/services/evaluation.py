"""
Métricas de avaliação: Dice, distância de superfície, regularidade da
deformação, segmentação por propagação do template e rótulos de template
pós-hoc para as variantes sem segmentação.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from app.config import CI_Z, INTEGRATION_STEPS
from app.services import grid_field
from app.services.exceptions import ConfigError, ContractViolationError, DatasetError, GridMismatchError
from app.services.grid_field import LabelMap, VectorField, Volume

logger = logging.getLogger(__name__)

# Linhas de cdist processadas por bloco
_CDIST_CHUNK = 2048


# =============================================================================
# Dice
# =============================================================================

@dataclass
class DiceResult:
    per_label: Dict[int, float]
    mean: float


def _check_pair(pred: LabelMap, gt: LabelMap) -> None:
    if pred.grid.dims != gt.grid.dims:
        raise GridMismatchError(f"Mapas em grids diferentes: {pred.grid.dims} vs {gt.grid.dims}")
    if pred.n_labels != gt.n_labels:
        raise ContractViolationError(f"Vocabulários diferentes: {pred.n_labels} vs {gt.n_labels} rótulos")


def dice(pred: LabelMap, gt: LabelMap) -> DiceResult:
    """
    Dice por rótulo (fundo excluído).

    Rótulos ausentes nos dois mapas ficam como NaN e fora da média.
    """
    _check_pair(pred, gt)
    per_label: Dict[int, float] = {}
    for c in range(1, pred.n_labels):
        a = pred.labels == c
        b = gt.labels == c
        total = int(a.sum()) + int(b.sum())
        per_label[c] = 2.0 * int(np.logical_and(a, b).sum()) / total if total else float("nan")

    present = [v for v in per_label.values() if not math.isnan(v)]
    mean = float(np.mean(present)) if present else float("nan")
    return DiceResult(per_label, mean)


# =============================================================================
# Distância de superfície
# =============================================================================

def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels do objeto com ao menos um vizinho de face fora dele (fora do grid conta como fundo)."""
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def _nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    out = np.empty(len(src))
    for start in range(0, len(src), _CDIST_CHUNK):
        block = src[start: start + _CDIST_CHUNK]
        out[start: start + len(block)] = cdist(block, dst).min(axis=1)
    return out


def surface_distance_label(a: np.ndarray, b: np.ndarray, spacing: Sequence[float]) -> float:
    """Distância média simétrica entre as bordas de duas máscaras não vazias."""
    scale = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary_mask(a)) * scale
    pb = np.argwhere(boundary_mask(b)) * scale
    d_ab = _nearest_distances(pa, pb)
    d_ba = _nearest_distances(pb, pa)
    return float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba)))


def surface_distance(pred: LabelMap, gt: LabelMap, spacing: Optional[Sequence[float]] = None) -> float:
    """
    Distância de superfície média simétrica, média sobre rótulos (fundo excluído).

    Rótulos com máscara vazia em qualquer lado são pulados com aviso.
    Retorna NaN se nenhum rótulo puder ser avaliado.
    """
    _check_pair(pred, gt)
    spacing = tuple(spacing) if spacing is not None else gt.grid.spacing
    values = []
    for c in range(1, pred.n_labels):
        a = pred.labels == c
        b = gt.labels == c
        if not a.any() or not b.any():
            logger.warning(f"Distância de superfície: rótulo {c} vazio, pulado")
            continue
        values.append(surface_distance_label(a, b, spacing))
    return float(np.mean(values)) if values else float("nan")


# =============================================================================
# Regularidade
# =============================================================================

@dataclass
class Regularity:
    neg_jac_fraction: float
    mean_grad_norm: float


def regularity(u: VectorField, margin: int = 1) -> Regularity:
    """Fração de voxels internos com det J ≤ 0 e norma de Frobenius média de ∇u."""
    det = grid_field.jacobian_determinant_array(u.data)
    inner = grid_field.interior_mask(u.grid.dims, margin)
    neg = float(np.mean(det[inner] <= 0)) if inner.any() else 0.0
    grad = grid_field.spatial_gradient_array(u.data)
    norm = np.sqrt(np.sum(grad ** 2, axis=(0, 1)))
    return Regularity(neg, float(norm.mean()))


# =============================================================================
# Segmentação por propagação
# =============================================================================

def warp_probabilities(t_seg: Volume, u: VectorField) -> LabelMap:
    """Argmax de warp(t_seg, u); empate -> menor rótulo."""
    warped = grid_field.warp(t_seg, u)
    labels = np.argmax(warped.data, axis=0).astype(np.int32)
    return LabelMap(t_seg.grid, labels, t_seg.channels)


def register_and_segment(subject: Any, model, template_seg: Optional[Volume] = None
                         ) -> Tuple[LabelMap, VectorField]:
    """
    Segmenta o sujeito deformando as probabilidades do template.

    Args:
        subject: Objeto com `.image` e `.attributes`
        model: AtlasModel
        template_seg: Probabilidades do template para variantes no-seg

    Returns:
        (rótulos previstos, deslocamento u)
    """
    template = model.template_for(subject.attributes)
    t_seg = template.seg if template.seg is not None else template_seg
    if t_seg is None:
        raise ConfigError("Variante sem segmentação requer rótulos pós-hoc do template")
    v = model.predict_velocity(subject.image, subject.attributes, template)
    u = grid_field.integrate_velocity(v, model.config.integration_steps)
    u = VectorField(u.grid, u.data.astype(np.float64), "displacement")
    seg = Volume(t_seg.grid, t_seg.data.astype(np.float64))
    return warp_probabilities(seg, u), u


def posthoc_template_labels(subjects: Sequence[Any], predictor, steps: Optional[int] = None
                            ) -> Tuple[Volume, LabelMap]:
    """
    Rótulos do template a partir dos sujeitos de treino.

    Cada one-hot é levado ao espaço do template por φ⁻¹ = exp(−v); as
    probabilidades são a média normalizada.

    Args:
        subjects: Sujeitos com `.image`, `.labels` e `.attributes`
        predictor: Objeto com `predict_velocity(image, attributes)`
        steps: Passos de integração (padrão: os do modelo)

    Raises:
        DatasetError: conjunto vazio
    """
    if not subjects:
        raise DatasetError("Rótulos pós-hoc sem sujeitos de treino")
    if steps is None:
        config = getattr(predictor, "config", None)
        steps = getattr(config, "integration_steps", INTEGRATION_STEPS)

    acc = None
    for s in subjects:
        v = predictor.predict_velocity(s.image, s.attributes)
        v = VectorField(v.grid, v.data.astype(np.float64), "velocity")
        u_inv = grid_field.invert_velocity(v, steps)
        warped = grid_field.warp_array(s.labels.one_hot(np.float64), u_inv.data)
        acc = warped if acc is None else acc + warped

    probs = acc / len(subjects)
    probs = probs / np.maximum(probs.sum(axis=0, keepdims=True), 1e-12)
    grid = subjects[0].labels.grid
    hard = LabelMap(grid, np.argmax(probs, axis=0).astype(np.int32), probs.shape[0])
    return Volume(grid, probs), hard


# =============================================================================
# Relatório
# =============================================================================

@dataclass
class SubjectMetrics:
    subject_id: str
    dice: DiceResult
    surface_distance: float
    regularity: Regularity


def ci_half_width(values: Sequence[float], z: float = CI_Z) -> float:
    """z·sd/√n (sd amostral); 0 com menos de 2 valores."""
    vals = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if vals.size < 2:
        return 0.0
    return float(z * vals.std(ddof=1) / math.sqrt(vals.size))


def _nanmean(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class MetricReport:
    rows: List[SubjectMetrics] = field(default_factory=list)
    n_labels: int = 0

    def aggregate(self) -> Dict[str, Tuple[float, float]]:
        """Métrica -> (média, meia-largura do IC 95%)."""
        series: Dict[str, List[float]] = {
            "dice_mean": [r.dice.mean for r in self.rows],
            "surface_distance": [r.surface_distance for r in self.rows],
            "neg_jac_fraction": [r.regularity.neg_jac_fraction for r in self.rows],
            "mean_grad_norm": [r.regularity.mean_grad_norm for r in self.rows],
        }
        for c in range(1, self.n_labels):
            series[f"dice_{c}"] = [r.dice.per_label.get(c, float("nan")) for r in self.rows]
        return {k: (_nanmean(v), ci_half_width(v)) for k, v in series.items()}

    @property
    def mean_dice(self) -> float:
        return _nanmean([r.dice.mean for r in self.rows])


def evaluate_subject(subject: Any, model, template_seg: Optional[Volume] = None) -> SubjectMetrics:
    pred, u = register_and_segment(subject, model, template_seg)
    return SubjectMetrics(
        subject.id,
        dice(pred, subject.labels),
        surface_distance(pred, subject.labels),
        regularity(u),
    )


def evaluate_dataset(subjects: Sequence[Any], model, template_seg: Optional[Volume] = None,
                     workers: int = 1) -> MetricReport:
    """Avalia cada sujeito; ordem das linhas segue a ordem dos ids."""
    ordered = sorted(subjects, key=lambda s: s.id)

    def run(s):
        return evaluate_subject(s, model, template_seg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, ordered))
    else:
        rows = [run(s) for s in ordered]

    n_labels = ordered[0].labels.n_labels if ordered else 0
    report = MetricReport(rows, n_labels)
    logger.info(f"Avaliação: {len(rows)} sujeitos, Dice médio {report.mean_dice:.4f}")
    return report
