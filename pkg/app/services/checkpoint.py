"""
Formato de checkpoint de parâmetros.

Layout:
    8 bytes   magic "AMCKPT01"
    u32       tamanho do header (little-endian)
    header    JSON UTF-8: entries [{name, kind, shape, dtype}], steps, rng, config
    payload   arrays concatenados na ordem das entries, little-endian

Cada parâmetro contribui três entries (value, m, v); o step count do Adam
fica em `steps`. O estado do gerador numpy permite retomar exatamente.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from app.services.autodiff import Parameter
from app.services.exceptions import CheckpointError
from app.services.file_utils import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AMCKPT01"
_KINDS = ("value", "m", "v")
_ALLOWED_DTYPES = ("<f4", "<f8")


@dataclass
class CheckpointState:
    """Conteúdo decodificado de um checkpoint."""

    arrays: Dict[str, Dict[str, np.ndarray]]
    steps: Dict[str, int]
    rng_state: Optional[Dict[str, Any]] = None
    config: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(
    params: Sequence[Parameter],
    rng: Optional[np.random.Generator] = None,
    config: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> bytes:
    entries: List[Dict[str, Any]] = []
    payloads: List[bytes] = []
    names = set()

    for p in params:
        if p.name in names:
            raise CheckpointError(f"Parâmetro duplicado '{p.name}'")
        names.add(p.name)
        dtype = np.dtype(p.value.dtype).newbyteorder("<")
        if dtype.str not in _ALLOWED_DTYPES:
            raise CheckpointError(f"dtype não suportado em '{p.name}': {dtype}")
        for kind in _KINDS:
            arr = getattr(p, kind)
            entries.append({"name": p.name, "kind": kind, "shape": list(arr.shape), "dtype": dtype.str})
            payloads.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    header = {
        "entries": entries,
        "steps": {p.name: int(p.step) for p in params},
        "rng": rng.bit_generator.state if rng is not None else None,
        "config": config or {},
        "extra": extra or {},
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(raw_header)) + raw_header + b"".join(payloads)


def decode_checkpoint(raw: bytes, path: Optional[Path] = None) -> CheckpointState:
    """
    Raises:
        CheckpointError: magic, header ou payload inválidos
    """
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("Magic de checkpoint inválido", path)

    offset = len(CHECKPOINT_MAGIC)
    try:
        (header_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        header = json.loads(raw[offset: offset + header_len].decode("utf-8"))
        offset += header_len
        entries = header["entries"]
        steps = {k: int(v) for k, v in header["steps"].items()}
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError):
        raise CheckpointError("Header de checkpoint corrompido", path)

    arrays: Dict[str, Dict[str, np.ndarray]] = {}
    for entry in entries:
        try:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(int(n) for n in entry["shape"])
            name, kind = entry["name"], entry["kind"]
        except (KeyError, TypeError, ValueError):
            raise CheckpointError("Entrada de manifesto inválida", path)
        if dtype.str not in _ALLOWED_DTYPES or kind not in _KINDS:
            raise CheckpointError(f"Entrada '{name}' com dtype/kind inválido", path)

        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"Payload truncado em '{name}'", path)
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        arrays.setdefault(name, {})[kind] = arr.copy()
        offset += nbytes

    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} bytes sobrando após o payload", path)

    for name, kinds in arrays.items():
        if set(kinds) != set(_KINDS):
            raise CheckpointError(f"Parâmetro '{name}' incompleto no checkpoint", path)

    return CheckpointState(arrays, steps, header.get("rng"), header.get("config") or {}, header.get("extra") or {})


def save_checkpoint(path: Path, params: Sequence[Parameter], rng: Optional[np.random.Generator] = None,
                    config: Optional[Dict[str, Any]] = None, extra: Optional[Dict[str, Any]] = None) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(params, rng, config, extra))
    logger.info(f"Checkpoint salvo: {path} ({len(params)} parâmetros)")


def load_checkpoint(path: Path) -> CheckpointState:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError("Checkpoint não encontrado", path)
    return decode_checkpoint(raw, path)


def restore_parameters(params: Sequence[Parameter], state: CheckpointState,
                       path: Optional[Path] = None) -> None:
    """
    Copia valores, momentos e step counts do checkpoint para os parâmetros.

    O dtype dos parâmetros em memória é preservado.

    Raises:
        CheckpointError: parâmetro ausente ou com shape diferente
    """
    for p in params:
        stored = state.arrays.get(p.name)
        if stored is None:
            raise CheckpointError(f"Parâmetro '{p.name}' ausente no checkpoint", path)
        if stored["value"].shape != p.value.shape:
            raise CheckpointError(
                f"Shape de '{p.name}' diverge: {stored['value'].shape} vs {p.value.shape}", path
            )
        p.value[...] = stored["value"]
        p.m[...] = stored["m"]
        p.v[...] = stored["v"]
        p.step = state.steps.get(p.name, 0)
        p.zero_grad()


def restore_rng(state: CheckpointState) -> np.random.Generator:
    """Gerador com o estado salvo (PCG64)."""
    rng = np.random.default_rng()
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    return rng
