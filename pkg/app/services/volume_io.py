"""
Codec do formato de tensor VOLB.

Layout (little-endian):
    8 bytes   magic "VOLB0001"
    1 byte    tipo do campo (apenas campos vetoriais: 0=velocity, 1=displacement)
    u32       D
    u32       C
    u32 x D   dims
    float32   C * prod(dims) valores, canal-major, row-major dentro do canal

LabelMaps são gravados como volumes de 1 canal com valores inteiros.
"""

import logging
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from app.services.exceptions import DatasetError
from app.services.grid_field import FIELD_KINDS, Grid, LabelMap, VectorField, Volume

logger = logging.getLogger(__name__)

# Magic bytes para validação de tipo real de arquivo
VOLB_MAGIC = b"VOLB0001"
_PAYLOAD_DTYPE = np.dtype("<f4")


def validate_magic_bytes(data: bytes) -> bool:
    """Verifica se os primeiros bytes correspondem ao magic VOLB."""
    return len(data) >= len(VOLB_MAGIC) and data.startswith(VOLB_MAGIC)


def encode_tensor(data: np.ndarray, kind: Optional[str] = None) -> bytes:
    """Serializa um array (C, *dims) em bytes VOLB."""
    dims = data.shape[1:]
    header = bytearray(VOLB_MAGIC)
    if kind is not None:
        header += bytes([FIELD_KINDS.index(kind)])
    header += struct.pack(f"<{2 + len(dims)}I", len(dims), data.shape[0], *dims)
    payload = np.ascontiguousarray(data, dtype=_PAYLOAD_DTYPE).tobytes()
    return bytes(header) + payload


def decode_tensor(raw: bytes, path: Path, with_kind: bool = False) -> Tuple[np.ndarray, Optional[str]]:
    """
    Desserializa bytes VOLB.

    Returns:
        (array float32 (C, *dims), kind ou None)

    Raises:
        DatasetError: magic, header ou tamanho de payload inválidos
    """
    if not validate_magic_bytes(raw):
        raise DatasetError("Magic VOLB inválido", path)

    offset = len(VOLB_MAGIC)
    kind = None
    if with_kind:
        if len(raw) <= offset:
            raise DatasetError("Arquivo VOLB truncado", path)
        code = raw[offset]
        if code >= len(FIELD_KINDS):
            raise DatasetError(f"Tipo de campo desconhecido ({code})", path)
        kind = FIELD_KINDS[code]
        offset += 1

    try:
        ndim, channels = struct.unpack_from("<2I", raw, offset)
        offset += 8
        if ndim not in (2, 3):
            raise DatasetError(f"Dimensão inválida no header ({ndim})", path)
        dims = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
    except struct.error:
        raise DatasetError("Header VOLB truncado", path)

    expected = channels * int(np.prod(dims)) * _PAYLOAD_DTYPE.itemsize
    if len(raw) - offset != expected:
        raise DatasetError(
            f"Payload VOLB com {len(raw) - offset} bytes, esperado {expected}", path
        )

    data = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE, offset=offset).reshape((channels,) + tuple(dims))
    return data.copy(), kind


def write_volume(path: Path, vol: Volume) -> None:
    path.write_bytes(encode_tensor(vol.data))


def read_volume(path: Path, spacing: Tuple[float, ...] = ()) -> Volume:
    data, _ = decode_tensor(_read(path), path)
    return Volume(Grid(data.shape[1:], spacing), data)


def write_field(path: Path, u: VectorField) -> None:
    path.write_bytes(encode_tensor(u.data, kind=u.kind))


def read_field(path: Path, spacing: Tuple[float, ...] = ()) -> VectorField:
    data, kind = decode_tensor(_read(path), path, with_kind=True)
    if data.shape[0] != data.ndim - 1:
        raise DatasetError(f"Campo com {data.shape[0]} componentes em grid {data.ndim - 1}D", path)
    return VectorField(Grid(data.shape[1:], spacing), data, kind)


def write_labels(path: Path, labels: LabelMap) -> None:
    path.write_bytes(encode_tensor(labels.labels[None].astype(np.float32)))


def read_labels(path: Path, n_labels: int, spacing: Tuple[float, ...] = ()) -> LabelMap:
    data, _ = decode_tensor(_read(path), path)
    if data.shape[0] != 1:
        raise DatasetError(f"Mapa de rótulos com {data.shape[0]} canais", path)
    values = data[0]
    labels = values.astype(np.int32)
    if not np.array_equal(labels, values):
        raise DatasetError("Mapa de rótulos com valores não inteiros", path)
    return LabelMap(Grid(labels.shape, spacing), labels, n_labels)


def _read(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DatasetError("Arquivo VOLB não encontrado", path)
