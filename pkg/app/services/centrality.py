"""
Centralidade condicional: densidade KDE dos atributos, pesos por âncora
e amostragem do batch.

O batch de cada passo é a própria amostra de centralidade: um sujeito de
treino sorteado define o atributo âncora a*, e os B sujeitos do batch são
sorteados em S(a*) com probabilidade proporcional a w_i(a*).
"""

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence

import numpy as np

from app.config import SIGMA_DENSITY, SIGMA_KDE
from app.services.attributes import AttributeRecord, PopulationStats
from app.services.exceptions import CentralityError, ContractViolationError

logger = logging.getLogger(__name__)

CentralityMode = Literal["conditional", "lt2019", "off"]
AnchorKind = Literal["joint", "categorical", "continuous"]

_TINY = np.finfo(np.float64).tiny


def kde_density(ages: Sequence[float], sigma_d: float = SIGMA_DENSITY) -> np.ndarray:
    """
    Q_i = Σ_{j≠i} exp(−(a_i − a_j)² / σ_d).

    Raises:
        CentralityError: menos de 2 sujeitos
    """
    a = np.asarray(ages, dtype=np.float64)
    if a.size < 2:
        raise CentralityError(f"Densidade indefinida para {a.size} sujeito(s)")
    k = np.exp(-((a[:, None] - a[None, :]) ** 2) / sigma_d)
    np.fill_diagonal(k, 0.0)
    return np.maximum(k.sum(axis=1), _TINY)


def kde_weights(anchor_age: float, ages: Sequence[float], density: np.ndarray,
                sigma_kde: float = SIGMA_KDE) -> np.ndarray:
    """w_i(a*) = exp(−(a* − a_i)² / σ_kde) / Q_i."""
    a = np.asarray(ages, dtype=np.float64)
    q = np.asarray(density, dtype=np.float64)
    if a.shape != q.shape:
        raise ContractViolationError(f"{a.shape} idades para {q.shape} densidades")
    return np.exp(-((anchor_age - a) ** 2) / sigma_kde) / q


def sample_weighted(weights: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """
    Sorteio sequencial sem reposição com probabilidade ∝ pesos.

    Quando a massa restante zera, o restante é sorteado uniformemente.
    """
    w = np.asarray(weights, dtype=np.float64)
    if size > w.size:
        raise ContractViolationError(f"Batch {size} maior que o conjunto ({w.size})")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ContractViolationError("Pesos de amostragem negativos ou não finitos")

    remaining = list(range(w.size))
    chosen: List[int] = []
    warned = False
    for _ in range(size):
        rw = w[remaining]
        total = rw.sum()
        if total > 0:
            pick = rng.choice(len(remaining), p=rw / total)
        else:
            if not warned:
                logger.warning("Soma dos pesos zerada; amostragem uniforme")
                warned = True
            pick = rng.integers(len(remaining))
        chosen.append(remaining.pop(int(pick)))
    return np.asarray(chosen, dtype=np.int64)


def sample_centrality_batch(weights: Optional[np.ndarray], size: int, rng: np.random.Generator,
                            candidates: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Índices do batch de centralidade.

    Args:
        weights: Pesos por candidato; None sorteia uniformemente (âncora categórica)
        size: B
        rng: Gerador
        candidates: Índices globais dos candidatos (padrão: 0..n-1)
    """
    n = len(candidates) if candidates is not None else len(weights)
    if weights is None:
        local = rng.choice(n, size=size, replace=False)
    else:
        local = sample_weighted(weights, size, rng)
    if candidates is None:
        return np.asarray(local, dtype=np.int64)
    return np.asarray(candidates, dtype=np.int64)[local]


@dataclass
class BatchPlan:
    indices: np.ndarray
    central_weights: Optional[np.ndarray]
    anchor: Optional[AttributeRecord]

    def describe(self) -> str:
        return self.anchor.describe() if self.anchor is not None else ""


class CentralitySampler:
    """
    Sorteia batches conforme o modo de centralidade.

    conditional: âncora = sujeito sorteado; batch em S(a*) ∝ w_i(a*)
                 (grupo com um único sujeito: batch uniforme sem L_central;
                 grupo menor que B: batch com o grupo inteiro)
    lt2019:      batch uniforme, ū pela média simples
    off:         batch uniforme, sem L_central
    """

    def __init__(
        self,
        records: Sequence[AttributeRecord],
        stats: PopulationStats,
        mode: CentralityMode = "conditional",
        anchor_kind: AnchorKind = "joint",
        sigma_kde: float = SIGMA_KDE,
        sigma_density: float = SIGMA_DENSITY,
        kde_units: str = "normalized",
        reweight: bool = False,
    ):
        self.records = list(records)
        self.mode = mode
        self.anchor_kind = anchor_kind
        self.sigma_kde = sigma_kde
        self.reweight = reweight

        if kde_units == "years":
            self.ages = np.array([r.age for r in self.records], dtype=np.float64)
        else:
            self.ages = np.array([stats.normalize_age(r.age) for r in self.records], dtype=np.float64)

        self.groups = {}
        for i, r in enumerate(self.records):
            key = r.categorical_key() if anchor_kind != "continuous" else ()
            self.groups.setdefault(key, []).append(i)

        self.density = np.ones(len(self.records))
        # Grupos com um único sujeito não têm densidade; passos ancorados neles saem sem L_central
        self.sparse_groups = {k for k, members in self.groups.items() if len(members) < 2}
        if mode == "conditional":
            if len(self.records) < 2:
                logger.warning(f"Centralidade condicional desativada: {len(self.records)} sujeito(s) no treino")
                self.mode = "off"
            else:
                for key, members in self.groups.items():
                    if key not in self.sparse_groups:
                        self.density[members] = kde_density(self.ages[members], sigma_density)
                if self.sparse_groups:
                    logger.warning(
                        f"{len(self.sparse_groups)} grupo(s) categórico(s) com um único sujeito: "
                        f"passos ancorados neles usam batch uniforme sem centralidade"
                    )

    def draw(self, batch_size: int, rng: np.random.Generator) -> BatchPlan:
        n = len(self.records)
        if self.mode != "conditional":
            indices = rng.choice(n, size=min(batch_size, n), replace=False)
            central = np.ones(len(indices)) if self.mode == "lt2019" else None
            return BatchPlan(np.asarray(indices, dtype=np.int64), central, None)

        anchor_idx = int(rng.integers(n))
        anchor = self.records[anchor_idx]
        key = anchor.categorical_key() if self.anchor_kind != "continuous" else ()
        if key in self.sparse_groups:
            indices = rng.choice(n, size=min(batch_size, n), replace=False)
            return BatchPlan(np.asarray(indices, dtype=np.int64), None, anchor)

        members = self.groups[key]
        size = min(batch_size, len(members))

        if self.anchor_kind == "categorical":
            indices = sample_centrality_batch(None, size, rng, members)
            w = np.ones(size)
        else:
            group_w = kde_weights(self.ages[anchor_idx], self.ages[members], self.density[members], self.sigma_kde)
            indices = sample_centrality_batch(group_w, size, rng, members)
            lookup = dict(zip(members, group_w))
            w = np.array([lookup[int(i)] for i in indices]) if self.reweight else np.ones(size)
            if not w.sum() > 0:
                w = np.ones(size)
        return BatchPlan(indices, w, anchor)
