"""Exceções customizadas do Atlas Lab."""

from typing import Dict, Optional, Sequence


class AtlasError(Exception):
    """Exceção base para erros do Atlas Lab."""
    pass


class ContractViolationError(AtlasError):
    """Entrada viola o contrato de uma operação (shape, grid, tipo de campo)."""

    def __init__(self, message: str, node_ids: Optional[Sequence[int]] = None):
        if node_ids:
            message = f"{message} (nós {list(node_ids)})"
        super().__init__(message)
        self.node_ids = list(node_ids) if node_ids else []


class GridMismatchError(ContractViolationError):
    """Volumes ou campos definidos em grids diferentes."""
    pass


class ConfigError(AtlasError):
    """Configuração inválida (arquivo, chave ou valor)."""
    pass


class AttributeEncodingError(AtlasError):
    """Atributo fora do vocabulário declarado ou da faixa da população."""
    pass


class SpecRejectedError(AtlasError):
    """Especificação de população gera estruturas fora do grid."""
    pass


class DatasetError(AtlasError):
    """Dataset corrompido ou incompleto no disco."""

    def __init__(self, message: str, path=None):
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)
        self.path = path


class CheckpointError(DatasetError):
    """Checkpoint com magic, manifesto ou payload inválido."""
    pass


class NonFiniteLossError(AtlasError):
    """Loss não finita; carrega o breakdown por termo para diagnóstico."""

    def __init__(self, breakdown: Dict[str, float]):
        terms = ", ".join(f"{k}={v:.6g}" for k, v in breakdown.items())
        super().__init__(f"Loss não finita: {terms}")
        self.breakdown = dict(breakdown)


class NanGradientError(AtlasError):
    """Gradiente com NaN; o passo do otimizador é abortado."""

    def __init__(self, param_name: str):
        super().__init__(f"Gradiente NaN no parâmetro '{param_name}'")
        self.param_name = param_name


class CentralityError(AtlasError):
    """Densidade de atributos indefinida (menos de 2 sujeitos)."""
    pass
