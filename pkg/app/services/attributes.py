"""
Registro e codificação de atributos por sujeito.

Vetor de atributos: [idade normalizada] ++ one-hot(sexo) ++ one-hot(extras),
com os extras em ordem alfabética de nome.
"""

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import SEX_VOCAB
from app.services.exceptions import AttributeEncodingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttributeRecord:
    """Atributos de um sujeito: idade (anos), sexo e categóricos extras opcionais."""

    age: float
    sex: str
    extras: Tuple[Tuple[str, str], ...] = ()

    @classmethod
    def create(cls, age: float, sex: str, extras: Optional[Dict[str, str]] = None) -> "AttributeRecord":
        return cls(float(age), str(sex), tuple(sorted((extras or {}).items())))

    @property
    def extras_dict(self) -> Dict[str, str]:
        return dict(self.extras)

    def categorical_key(self) -> Tuple[str, ...]:
        """Chave do grupo categórico S(a): sexo e extras."""
        return (self.sex,) + tuple(v for _, v in self.extras)

    def describe(self) -> str:
        parts = [f"age={self.age:g}", f"sex={self.sex}"] + [f"{k}={v}" for k, v in self.extras]
        return " ".join(parts)


@dataclass
class PopulationStats:
    """Faixa de idade do treino e vocabulários declarados."""

    age_min: float
    age_max: float
    sex_vocab: Tuple[str, ...] = SEX_VOCAB
    extras_vocab: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.age_max > self.age_min:
            raise AttributeEncodingError(
                f"Faixa de idade degenerada: [{self.age_min}, {self.age_max}]"
            )
        self.sex_vocab = tuple(self.sex_vocab)
        self.extras_vocab = {k: tuple(v) for k, v in sorted(self.extras_vocab.items())}

    @classmethod
    def from_records(cls, records: Sequence[AttributeRecord],
                     extras_vocab: Optional[Dict[str, Sequence[str]]] = None) -> "PopulationStats":
        if not records:
            raise AttributeEncodingError("Estatísticas de população exigem ao menos um sujeito")
        ages = [r.age for r in records]
        if extras_vocab is None:
            vocab: Dict[str, set] = {}
            for r in records:
                for k, v in r.extras:
                    vocab.setdefault(k, set()).add(v)
            extras_vocab = {k: tuple(sorted(v)) for k, v in vocab.items()}
        lo, hi = min(ages), max(ages)
        if hi == lo:
            # População de idade única: faixa simétrica de 1 ano
            lo, hi = lo - 0.5, hi + 0.5
        return cls(lo, hi, SEX_VOCAB, dict(extras_vocab))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "age_min": self.age_min,
            "age_max": self.age_max,
            "sex_vocab": list(self.sex_vocab),
            "extras_vocab": {k: list(v) for k, v in self.extras_vocab.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PopulationStats":
        return cls(
            float(data["age_min"]),
            float(data["age_max"]),
            tuple(data.get("sex_vocab", SEX_VOCAB)),
            {k: tuple(v) for k, v in data.get("extras_vocab", {}).items()},
        )

    @property
    def vector_size(self) -> int:
        return 1 + len(self.sex_vocab) + sum(len(v) for v in self.extras_vocab.values())

    def normalize_age(self, age: float) -> float:
        return 2.0 * (age - self.age_min) / (self.age_max - self.age_min) - 1.0

    def denormalize_age(self, value: float) -> float:
        return self.age_min + (value + 1.0) * 0.5 * (self.age_max - self.age_min)

    def in_support(self, age: float) -> bool:
        return self.age_min <= age <= self.age_max

    def categorical_levels(self) -> List[Dict[str, str]]:
        """Todas as combinações dos extras declarados ([{}] sem extras)."""
        names = list(self.extras_vocab)
        return [dict(zip(names, combo)) for combo in product(*(self.extras_vocab[n] for n in names))]


def parse_extras(text: Optional[str]) -> Dict[str, str]:
    """
    Lê extras no formato `nome=valor,nome=valor`.

    Raises:
        AttributeEncodingError: item sem '=' ou nome repetido
    """
    out: Dict[str, str] = {}
    for item in (text or "").split(","):
        if not item.strip():
            continue
        name, sep, value = item.partition("=")
        name, value = name.strip(), value.strip()
        if not sep or not name or not value:
            raise AttributeEncodingError(f"Extra inválido '{item.strip()}', esperado nome=valor")
        if name in out:
            raise AttributeEncodingError(f"Extra '{name}' repetido")
        out[name] = value
    return out


def extras_tag(sex: str, extras: Optional[Dict[str, str]] = None) -> str:
    """Rótulo do grupo categórico para nomes de arquivo: `F` ou `F_stage-AD`."""
    return "_".join([sex] + [f"{k}-{v}" for k, v in sorted((extras or {}).items())])


def _one_hot_block(value: str, vocab: Sequence[str], name: str) -> List[float]:
    if value not in vocab:
        raise AttributeEncodingError(f"Valor '{value}' fora do vocabulário de '{name}': {list(vocab)}")
    return [1.0 if v == value else 0.0 for v in vocab]


def encode_attributes(rec: AttributeRecord, stats: PopulationStats, strict: bool = True,
                      dtype=np.float64) -> np.ndarray:
    """
    Codifica um registro em vetor real.

    Args:
        rec: Registro
        stats: Faixa de idade do treino e vocabulários
        strict: Rejeita idades fora da faixa; com False a idade é limitada a [-1, 1]

    Raises:
        AttributeEncodingError: categórico desconhecido ou idade fora da faixa (strict)
    """
    age = stats.normalize_age(rec.age)
    if not -1.0 - 1e-12 <= age <= 1.0 + 1e-12:
        if strict:
            raise AttributeEncodingError(
                f"Idade {rec.age} fora da faixa [{stats.age_min}, {stats.age_max}]"
            )
        logger.warning(f"Idade {rec.age} fora do suporte do treino; limitada à borda")
    age = float(np.clip(age, -1.0, 1.0))

    values = [age] + _one_hot_block(rec.sex, stats.sex_vocab, "sex")
    extras = rec.extras_dict
    unknown = set(extras) - set(stats.extras_vocab)
    if unknown:
        raise AttributeEncodingError(f"Atributos extras não declarados: {sorted(unknown)}")
    for name, vocab in stats.extras_vocab.items():
        if name not in extras:
            raise AttributeEncodingError(f"Atributo extra '{name}' ausente")
        values += _one_hot_block(extras[name], vocab, name)
    return np.asarray(values, dtype=dtype)


def decode_attributes(vec: np.ndarray, stats: PopulationStats) -> AttributeRecord:
    """Inverso de encode_attributes (idade até a precisão da normalização)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (stats.vector_size,):
        raise AttributeEncodingError(f"Vetor de atributos com shape {vec.shape}, esperado ({stats.vector_size},)")
    offset = 1
    sex = stats.sex_vocab[int(np.argmax(vec[offset: offset + len(stats.sex_vocab)]))]
    offset += len(stats.sex_vocab)
    extras = {}
    for name, vocab in stats.extras_vocab.items():
        extras[name] = vocab[int(np.argmax(vec[offset: offset + len(vocab)]))]
        offset += len(vocab)
    return AttributeRecord.create(stats.denormalize_age(float(vec[0])), sex, extras)
