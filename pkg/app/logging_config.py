"""Logging configuration for Atlas Lab."""

import logging
import sys
from pathlib import Path
from typing import Optional

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


def setup_logging(level: int = logging.INFO) -> None:
    """Configure structured logging for the application.

    Args:
        level: Logging level (default: INFO)
    """
    # Formato com timestamp, nível e contexto
    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)

    # Console handler
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(formatter)

    # Root logger
    root = logging.getLogger()
    root.setLevel(level)

    # Evitar handlers duplicados
    if not root.handlers:
        root.addHandler(handler)

    # Reduzir ruído de dependências
    logging.getLogger('uvicorn.access').setLevel(logging.WARNING)
    logging.getLogger('httpx').setLevel(logging.WARNING)
    logging.getLogger('httpcore').setLevel(logging.WARNING)
    logging.getLogger('PIL').setLevel(logging.WARNING)


def attach_run_log(run_dir: Path, level: Optional[int] = None) -> logging.Handler:
    """Adiciona um FileHandler gravando run.log dentro do diretório da execução.

    Returns:
        O handler criado (o chamador remove ao final do comando)
    """
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT))
    if level is not None:
        handler.setLevel(level)
    logging.getLogger().addHandler(handler)
    return handler
