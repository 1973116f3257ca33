"""
Diretórios de execução com carimbo de data, log e manifesto.

Estrutura no disco:
    <out>/
    └── 20261019-142501_train_run_1a2b3c/
        ├── config.frozen.cfg   # config resolvido
        ├── run.log             # log do comando
        ├── manifest.json       # status, versão e sha256 de cada arquivo
        └── ...                 # saídas do comando
"""

import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional
from uuid import uuid4

from app.__version__ import __version__
from app.logging_config import attach_run_log
from app.services.exceptions import DatasetError
from app.services.file_utils import atomic_json_write, checksum_tree, read_json, sanitize_name
from app.services.run_config import FROZEN_CONFIG_NAME, RunConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

STATUS_RUNNING = "running"
STATUS_COMPLETED = "completed"
STATUS_FAILED = "failed"


@dataclass
class RunSummary:
    """Entrada da listagem de execuções."""

    id: str
    command: str
    status: str
    created_at: str
    finished_at: Optional[str] = None
    version: str = __version__
    files: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def make_run_id(command: str, name: str) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    return f"{stamp}_{sanitize_name(command)}_{sanitize_name(name)}_{uuid4().hex[:6]}"


class RunContext:
    """
    Execução de um comando da CLI.

    Uso:
        with RunContext(config, "train") as run:
            ...grava em run.path...
        # manifest.json escrito ao sair, com status completed/failed
    """

    def __init__(self, config: RunConfig, command: str, out_dir: Optional[Path] = None):
        self.config = config
        self.command = command
        self.root = Path(out_dir or config.out).expanduser()
        self.id = make_run_id(command, config.name)
        self.path = self.root / self.id
        self.created_at = _now()
        self.status = STATUS_RUNNING
        self.extra: Dict[str, Any] = {}
        self._handler: Optional[logging.Handler] = None

    def __enter__(self) -> "RunContext":
        self.path.mkdir(parents=True, exist_ok=False)
        self.config.write_frozen(self.path)
        self._handler = attach_run_log(self.path)
        self._write_manifest(with_checksums=False)
        logger.info(f"Execução {self.id} ({self.command}) em {self.path}")
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        self.status = STATUS_FAILED if exc_type is not None else STATUS_COMPLETED
        if exc_type is not None:
            logger.error(f"Execução {self.id} falhou: {exc}")
        else:
            logger.info(f"Execução {self.id} concluída")
        if self._handler is not None:
            logging.getLogger().removeHandler(self._handler)
            self._handler.close()
            self._handler = None
        self._write_manifest(with_checksums=True)
        return False

    def _write_manifest(self, with_checksums: bool) -> None:
        checksums = checksum_tree(self.path, exclude=[MANIFEST_NAME]) if with_checksums else {}
        atomic_json_write(self.path / MANIFEST_NAME, {
            "id": self.id,
            "command": self.command,
            "status": self.status,
            "version": __version__,
            "created_at": self.created_at,
            "finished_at": None if self.status == STATUS_RUNNING else _now(),
            "seed": self.config.seed,
            "checksums": checksums,
            "extra": self.extra,
        })


def verify_run(run_dir: Path) -> None:
    """
    Confere os checksums do manifesto.

    Raises:
        DatasetError: arquivo ausente ou alterado
    """
    manifest = read_json(Path(run_dir) / MANIFEST_NAME, DatasetError)
    actual = checksum_tree(run_dir, exclude=[MANIFEST_NAME])
    for rel, digest in manifest.get("checksums", {}).items():
        if rel not in actual:
            raise DatasetError(f"Arquivo listado no manifesto ausente ({rel})", run_dir)
        if actual[rel] != digest:
            raise DatasetError(f"Checksum divergente ({rel})", run_dir)


def read_run(run_dir: Path) -> RunSummary:
    manifest = read_json(Path(run_dir) / MANIFEST_NAME, DatasetError)
    return RunSummary(
        id=manifest["id"],
        command=manifest["command"],
        status=manifest["status"],
        created_at=manifest["created_at"],
        finished_at=manifest.get("finished_at"),
        version=manifest.get("version", __version__),
        files=sorted(manifest.get("checksums", {}).keys()),
    )


def list_runs(root: Path) -> List[RunSummary]:
    """Execuções sob `root`, mais recentes primeiro; diretórios sem manifesto são ignorados."""
    root = Path(root)
    if not root.is_dir():
        return []
    runs = []
    for child in root.iterdir():
        if not (child / MANIFEST_NAME).is_file():
            continue
        try:
            runs.append(read_run(child))
        except (DatasetError, KeyError) as e:
            logger.warning(f"Manifesto ilegível em {child}: {e}")
    return sorted(runs, key=lambda r: (r.created_at, r.id), reverse=True)


def find_run(root: Path, run_id: str) -> Path:
    """
    Raises:
        DatasetError: execução inexistente
    """
    safe = sanitize_name(run_id, default="")
    path = Path(root) / safe
    if not safe or safe != run_id or not (path / MANIFEST_NAME).is_file():
        raise DatasetError("Execução não encontrada", run_id)
    return path
