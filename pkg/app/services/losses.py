"""
Termos da loss e a loss total de um passo.

    L = Σ_batch (L_img + L_seg + L_smooth) + L_central

L_img e L_smooth são normalizados pelo número de voxels; σ² da
verossimilhança gaussiana está embutido em λ_img.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import (
    DICE_EPS,
    LAMBDA_CENTRAL,
    LAMBDA_IMG,
    LAMBDA_SEG,
    LAMBDA_SMOOTH,
    LOG_EPS,
    SIGMA_DENSITY,
    SIGMA_KDE,
)
from app.services import autodiff as ad
from app.services.autodiff import Node, Tape
from app.services.exceptions import ContractViolationError, NonFiniteLossError

logger = logging.getLogger(__name__)

SegLossKind = Literal["soft-dice", "cross-entropy"]


class LossWeights(BaseModel):
    """Pesos dos termos e larguras dos kernels de centralidade."""

    model_config = ConfigDict(extra="forbid")

    lambda_img: float = Field(LAMBDA_IMG, ge=0)
    lambda_seg: float = Field(LAMBDA_SEG, ge=0)
    lambda_smooth: float = Field(LAMBDA_SMOOTH, ge=0)
    lambda_central: float = Field(LAMBDA_CENTRAL, ge=0)
    sigma_kde: float = Field(SIGMA_KDE, gt=0)
    sigma_density: float = Field(SIGMA_DENSITY, gt=0)
    seg_loss: SegLossKind = "soft-dice"
    kde_units: Literal["normalized", "years"] = "normalized"


# =============================================================================
# Termos
# =============================================================================

def _n_voxels(node: Node) -> int:
    return int(np.prod(node.shape[1:]))


def loss_img(x: Node, t_img: Node, u: Node, lambda_img: float = LAMBDA_IMG) -> Node:
    """(λ_img/2) · média por voxel de (x − t_img ∘ φ)²."""
    if x.shape != t_img.shape:
        raise ContractViolationError(f"Imagem {x.shape} e template {t_img.shape}", [x.id, t_img.id])
    diff = ad.sub(x, ad.warp(t_img, u))
    return ad.scale(ad.sum(ad.square(diff)), 0.5 * lambda_img / _n_voxels(x))


def soft_dice(s: Node, w: Node, eps: float = DICE_EPS) -> Node:
    """Dice suave por rótulo, shape (C,): 2Σ(s·w) / (Σs + Σw + ε)."""
    inter = ad.sum_spatial(ad.mul(s, w))
    denom = ad.add_const(ad.sum_spatial(w), s.value.reshape(s.shape[0], -1).sum(axis=1) + eps)
    return ad.divide(ad.scale(inter, 2.0), denom)


def loss_seg(s: Node, t_seg: Node, u: Node, lambda_seg: float = LAMBDA_SEG,
             kind: SegLossKind = "soft-dice") -> Node:
    """
    Loss de segmentação entre o one-hot do sujeito e o template deformado.

    soft-dice:     −λ_seg · média_c Dice_c(s, w)
    cross-entropy: λ_seg · média por voxel de −Σ_c s_c log(w_c + 1e-8)
    """
    if s.shape != t_seg.shape:
        raise ContractViolationError(f"Rótulos {s.shape} e template {t_seg.shape}", [s.id, t_seg.id])
    w = ad.warp(t_seg, u)
    if kind == "soft-dice":
        return ad.scale(ad.mean(soft_dice(s, w)), -lambda_seg)
    if kind == "cross-entropy":
        ll = ad.sum(ad.mul(s, ad.log(ad.add_const(w, LOG_EPS))))
        return ad.scale(ll, -lambda_seg / _n_voxels(s))
    raise ContractViolationError(f"Loss de segmentação desconhecida: {kind}")


def loss_smooth(u: Node, lambda_smooth: float = LAMBDA_SMOOTH) -> Node:
    """(λ_a/2) · Σ ‖∇u‖² / N_voxels."""
    g = ad.spatial_gradient(u)
    return ad.scale(ad.sum(ad.square(g)), 0.5 * lambda_smooth / _n_voxels(u))


def weighted_mean_field(us: Sequence[Node], weights: np.ndarray) -> Node:
    """ū = Σ w_i u_i / Σ w_i."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(us) == 0 or weights.shape != (len(us),):
        raise ContractViolationError(f"{len(us)} campos para {weights.shape} pesos")
    total = float(weights.sum())
    if not total > 0:
        raise ContractViolationError("Soma dos pesos de centralidade não positiva")
    acc = None
    for u, w in zip(us, weights):
        term = ad.scale(u, w / total)
        acc = term if acc is None else ad.add(acc, term)
    return acc


def loss_central(us: Sequence[Node], weights: np.ndarray, lambda_central: float = LAMBDA_CENTRAL) -> Node:
    """λ_c · média por voxel de ‖ū‖², ū ponderado pelos pesos KDE."""
    ubar = weighted_mean_field(us, weights)
    return ad.scale(ad.sum(ad.square(ubar)), lambda_central / _n_voxels(ubar))


def loss_central_global(us: Sequence[Node], lambda_central: float = LAMBDA_CENTRAL) -> Node:
    """Centralidade global: média simples do batch, sem atributos."""
    return loss_central(us, np.ones(len(us)), lambda_central)


# =============================================================================
# Loss total
# =============================================================================

@dataclass
class LossBreakdown:
    img: float
    seg: float
    smooth: float
    central: float
    total: float
    anchor: str = ""

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.img, self.seg, self.smooth, self.central, self.total))


def _sum_nodes(nodes: List[Node]) -> Optional[Node]:
    acc = None
    for n in nodes:
        acc = n if acc is None else ad.add(acc, n)
    return acc


def _value(node: Optional[Node]) -> float:
    return float(node.value) if node is not None else 0.0


def total_loss(
    tape: Tape,
    model,
    batch: Sequence[Any],
    weights: LossWeights,
    central_weights: Optional[np.ndarray] = None,
    anchor: str = "",
) -> Tuple[Node, LossBreakdown]:
    """
    Loss completa de um passo sobre o batch.

    Args:
        tape: Grafo onde os nós são criados
        model: AtlasModel
        batch: Sujeitos com `.image`, `.labels` e `.attributes`
        weights: Pesos dos termos
        central_weights: Pesos de ū sobre o batch; None desliga L_central
        anchor: Descrição do atributo âncora (vai para o CSV)

    Raises:
        NonFiniteLossError: algum termo não finito (breakdown anexado)
    """
    if not batch:
        raise ContractViolationError("Batch vazio")
    dtype = model.dtype
    use_seg = model.config.with_seg and weights.lambda_seg > 0
    use_smooth = weights.lambda_smooth > 0
    use_central = central_weights is not None and weights.lambda_central > 0

    img_terms, seg_terms, smooth_terms, fields = [], [], [], []
    for subject in batch:
        x = tape.constant(subject.image.data.astype(dtype))
        out = model.model_forward(tape, x, model.encode(subject.attributes))
        img_terms.append(loss_img(x, out.template.intensity, out.displacement, weights.lambda_img))
        if use_seg:
            s = tape.constant(subject.labels.one_hot(dtype))
            seg_terms.append(loss_seg(s, out.template.seg, out.displacement, weights.lambda_seg, weights.seg_loss))
        if use_smooth:
            smooth_terms.append(loss_smooth(out.displacement, weights.lambda_smooth))
        fields.append(out.displacement)

    img = _sum_nodes(img_terms)
    seg = _sum_nodes(seg_terms)
    smooth = _sum_nodes(smooth_terms)
    central = loss_central(fields, central_weights, weights.lambda_central) if use_central else None

    total = _sum_nodes([n for n in (img, seg, smooth, central) if n is not None])
    breakdown = LossBreakdown(
        img=_value(img),
        seg=_value(seg),
        smooth=_value(smooth),
        central=_value(central),
        total=_value(total),
        anchor=anchor,
    )
    if not breakdown.is_finite():
        terms = {k: v for k, v in breakdown.as_dict().items() if k != "anchor"}
        logger.error(f"Loss não finita no batch: {terms}")
        raise NonFiniteLossError(terms)
    return total, breakdown
