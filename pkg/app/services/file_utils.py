"""
Utilitários de arquivo compartilhados: escrita atômica, checksums e nomes seguros.
"""

import hashlib
import json
import logging
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

logger = logging.getLogger(__name__)

_CHUNK = 1 << 20


def sanitize_name(name: str, default: str = "run") -> str:
    """
    Remove caracteres perigosos de nomes de diretório de execução.

    Previne path traversal e caracteres especiais.
    """
    if not name:
        return default

    # Remove path components (previne ../ e similares)
    name = Path(name).name

    safe_name = re.sub(r"[^\w\-.]", "_", name, flags=re.UNICODE).strip("._")
    return safe_name[:100] or default


def atomic_write_bytes(filepath: Path, data: bytes) -> None:
    """
    Escreve bytes atomicamente usando temp + replace.

    Args:
        filepath: Caminho do arquivo destino (diretório pai criado se preciso)
        data: Conteúdo
    """
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)

    fd, temp_path = tempfile.mkstemp(
        dir=filepath.parent, prefix=f".{filepath.name}.", suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())  # Garante dados no disco antes do replace
        os.replace(temp_path, filepath)
    except Exception:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise


def atomic_json_write(filepath: Path, data: Dict[str, Any]) -> None:
    """Escreve JSON atomicamente, chaves ordenadas para saída determinística."""
    text = json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True)
    atomic_write_bytes(filepath, (text + "\n").encode("utf-8"))


def atomic_text_write(filepath: Path, text: str) -> None:
    atomic_write_bytes(filepath, text.encode("utf-8"))


def sha256_file(path: Path) -> str:
    """Hash sha256 hexadecimal do conteúdo de um arquivo."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def checksum_tree(root: Path, exclude: Iterable[str] = ()) -> Dict[str, str]:
    """
    Checksums de todos os arquivos sob `root`, chaves relativas com '/'.

    Args:
        root: Diretório base
        exclude: Nomes relativos ignorados (ex.: o próprio manifest)
    """
    root = Path(root)
    skip = set(exclude)
    out: Dict[str, str] = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.name.startswith("."):
            continue
        rel = path.relative_to(root).as_posix()
        if rel in skip:
            continue
        out[rel] = sha256_file(path)
    return out


def read_json(path: Path, error_cls: Optional[type] = None) -> Dict[str, Any]:
    """
    Lê JSON de disco.

    Raises:
        error_cls(message, path) quando fornecido; senão a exceção original
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        if error_cls is None:
            raise
        raise error_cls(f"JSON ilegível ({e.__class__.__name__})", path)
