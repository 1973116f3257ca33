"""
Análise de tendência: volume das estruturas do template ao longo da idade
comparado com a curva populacional (Nadaraya–Watson gaussiano).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.config import LABEL_NAMES, TREND_AGES, TREND_BANDWIDTH
from app.services.attributes import AttributeRecord, extras_tag
from app.services.exceptions import ConfigError

logger = logging.getLogger(__name__)

# Estruturas analisadas por padrão: ventrículo e hipocampo
DEFAULT_STRUCTURES = (2, 3)

_MIN_KERNEL_MASS = 1e-300


def nadaraya_watson(query: Sequence[float], ages: Sequence[float], values: Sequence[float],
                    bandwidth: float = TREND_BANDWIDTH) -> np.ndarray:
    """
    Média ponderada por kernel gaussiano exp(−(q − a)² / 2h²).

    Idades sem massa de kernel recebem NaN.
    """
    q = np.asarray(query, dtype=np.float64)[:, None]
    a = np.asarray(ages, dtype=np.float64)[None, :]
    y = np.asarray(values, dtype=np.float64)
    k = np.exp(-((q - a) ** 2) / (2.0 * bandwidth ** 2))
    mass = k.sum(axis=1)
    out = np.full(q.shape[0], np.nan)
    ok = mass > _MIN_KERNEL_MASS
    out[ok] = (k[ok] @ y) / mass[ok]
    return out


def template_volumes(model, ages: Sequence[float], sex: str,
                     extras: Optional[Dict[str, str]] = None) -> np.ndarray:
    """
    Volume por rótulo do argmax do template em cada idade, shape (n_idades, C).

    Raises:
        ConfigError: modelo sem cabeça de segmentação
    """
    if not model.config.with_seg:
        raise ConfigError("Tendência requer modelo com segmentação do template")
    vox = model.grid.voxel_volume
    out = []
    for age in ages:
        template = model.template_for(AttributeRecord.create(age, sex, extras))
        out.append(template.hard_labels().counts() * vox)
    return np.asarray(out, dtype=np.float64)


@dataclass
class TrendRow:
    age: float
    structure: int
    template_vol: float
    kde_vol: float
    lt2019_vol: float
    rel_err: float
    lt2019_rel_err: float
    in_support: bool

    @property
    def structure_name(self) -> str:
        return LABEL_NAMES.get(self.structure, f"label{self.structure}")


@dataclass
class TrendReport:
    sex: str
    bandwidth: float
    rows: List[TrendRow] = field(default_factory=list)
    extras: Dict[str, str] = field(default_factory=dict)

    @property
    def tag(self) -> str:
        return extras_tag(self.sex, self.extras)

    def curve(self, structure: int, column: str = "template_vol") -> np.ndarray:
        return np.array([getattr(r, column) for r in self.rows if r.structure == structure])

    def ages(self) -> List[float]:
        return sorted({r.age for r in self.rows})

    def mean_relative_error(self, structure: int, lt2019: bool = False) -> float:
        column = "lt2019_rel_err" if lt2019 else "rel_err"
        vals = [getattr(r, column) for r in self.rows if r.structure == structure and r.in_support]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def error_summary(self) -> Dict[str, Dict[str, float]]:
        """Distribuição do erro relativo por estrutura: média, desvio e máximo."""
        out = {}
        for c in sorted({r.structure for r in self.rows}):
            errs = np.array([r.rel_err for r in self.rows if r.structure == c and not math.isnan(r.rel_err)])
            name = LABEL_NAMES.get(c, f"label{c}")
            if errs.size == 0:
                out[name] = {"mean": float("nan"), "std": float("nan"), "max": float("nan")}
            else:
                out[name] = {"mean": float(errs.mean()), "std": float(errs.std()), "max": float(errs.max())}
        return out


def _relative_error(pred: float, ref: float) -> float:
    if math.isnan(pred) or math.isnan(ref) or ref == 0:
        return float("nan")
    return abs(pred - ref) / ref


def _in_group(rec: AttributeRecord, sex: str, extras: Dict[str, str]) -> bool:
    have = rec.extras_dict
    return rec.sex == sex and all(have.get(k) == v for k, v in extras.items())


def trend_analysis(
    model,
    subjects: Sequence,
    sex: str,
    ages: Sequence[float] = TREND_AGES,
    bandwidth: float = TREND_BANDWIDTH,
    lt2019_model=None,
    structures: Sequence[int] = DEFAULT_STRUCTURES,
    extras: Optional[Dict[str, str]] = None,
) -> TrendReport:
    """
    Curvas de volume do template vs. curva populacional KDE.

    A população de referência são os sujeitos do mesmo sexo e com os
    extras dados (todos, se nenhum). Modelos cujas estatísticas declaram
    extras exigem `extras`. Idades fora do suporte dos dados são marcadas,
    não rejeitadas.
    """
    extras = dict(extras or {})
    pool = [s for s in subjects if _in_group(s.attributes, sex, extras)] or list(subjects)
    if not pool:
        raise ConfigError("Análise de tendência sem sujeitos")
    pop_ages = np.array([s.attributes.age for s in pool])
    lo, hi = pop_ages.min(), pop_ages.max()

    tmpl = template_volumes(model, ages, sex, extras)
    lt = template_volumes(lt2019_model, ages, sex, extras) if lt2019_model is not None else None

    report = TrendReport(sex, bandwidth, extras=extras)
    for c in structures:
        vox = getattr(pool[0].image.grid, "voxel_volume", 1.0)
        gt = np.array([s.volumes[c] for s in pool], dtype=np.float64) * vox
        kde = nadaraya_watson(ages, pop_ages, gt, bandwidth)
        for i, age in enumerate(ages):
            in_support = bool(lo <= age <= hi) and not math.isnan(kde[i])
            if not in_support:
                logger.warning(f"Idade {age} fora do suporte dos dados ({lo:.1f}-{hi:.1f})")
            lt_vol = float(lt[i, c]) if lt is not None else float("nan")
            report.rows.append(TrendRow(
                age=float(age),
                structure=int(c),
                template_vol=float(tmpl[i, c]),
                kde_vol=float(kde[i]),
                lt2019_vol=lt_vol,
                rel_err=_relative_error(float(tmpl[i, c]), float(kde[i])),
                lt2019_rel_err=_relative_error(lt_vol, float(kde[i])),
                in_support=in_support,
            ))

    for c in structures:
        logger.info(
            f"Tendência {LABEL_NAMES.get(c, c)} ({report.tag}): erro relativo médio "
            f"{report.mean_relative_error(c):.4f}"
        )
    return report
