"""
Persistência de datasets.

Estrutura em disco:
    dataset/
    ├── manifest.json        # spec, grid, metadados por sujeito, checksums
    ├── attributes.csv       # id, age, sex, extras, volumes por estrutura
    └── subjects/
        ├── sub-0000_image.volb
        └── sub-0000_labels.volb
"""

import csv
import io
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from app.config import LABEL_NAMES, get_data_root
from app.services import volume_io
from app.services.attributes import AttributeRecord
from app.services.exceptions import DatasetError
from app.services.file_utils import atomic_json_write, atomic_text_write, checksum_tree, read_json, sha256_file
from app.services.synthdata import Dataset, PopulationSpec, Subject, split

logger = logging.getLogger(__name__)

DATASET_FORMAT = "atlas-lab-dataset/1"
MANIFEST_NAME = "manifest.json"
ATTRIBUTES_NAME = "attributes.csv"
SUBJECTS_DIR = "subjects"


def _image_rel(subject_id: str) -> str:
    return f"{SUBJECTS_DIR}/{subject_id}_image.volb"


def _labels_rel(subject_id: str) -> str:
    return f"{SUBJECTS_DIR}/{subject_id}_labels.volb"


def _volume_columns(n_labels: int) -> List[str]:
    return [f"vol_{LABEL_NAMES.get(c, f'label{c}')}" for c in range(n_labels)]


def attributes_csv(dataset: Dataset) -> str:
    """CSV de atributos; floats em repr para ida e volta exata."""
    extras = sorted({k for s in dataset for k, _ in s.attributes.extras})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "age", "sex"] + extras + _volume_columns(dataset.n_labels))
    for s in dataset:
        ex = s.attributes.extras_dict
        writer.writerow(
            [s.id, repr(float(s.attributes.age)), s.attributes.sex]
            + [ex.get(k, "") for k in extras]
            + [str(int(v)) for v in s.volumes]
        )
    return buf.getvalue()


def save_dataset(dataset: Dataset, path: Path) -> Path:
    """
    Grava o dataset; os arquivos são escritos em série.

    Returns:
        Diretório do dataset
    """
    path = Path(path)
    (path / SUBJECTS_DIR).mkdir(parents=True, exist_ok=True)

    subjects_meta = []
    for s in dataset:
        volume_io.write_volume(path / _image_rel(s.id), s.image)
        volume_io.write_labels(path / _labels_rel(s.id), s.labels)
        subjects_meta.append({
            "id": s.id,
            "age": float(s.attributes.age),
            "sex": s.attributes.sex,
            "extras": s.attributes.extras_dict,
            "volumes": [int(v) for v in s.volumes],
            "metadata": s.metadata,
        })

    atomic_text_write(path / ATTRIBUTES_NAME, attributes_csv(dataset))

    grid = dataset.subjects[0].image.grid if dataset.subjects else None
    manifest = {
        "format": DATASET_FORMAT,
        "spec": dataset.spec.model_dump(mode="json") if dataset.spec is not None else None,
        "n_labels": dataset.n_labels,
        "grid": {"dims": list(grid.dims), "spacing": list(grid.spacing)} if grid else None,
        "subjects": subjects_meta,
        "checksums": checksum_tree(path, exclude=[MANIFEST_NAME]),
    }
    atomic_json_write(path / MANIFEST_NAME, manifest)
    logger.info(f"Dataset salvo em {path} ({len(dataset)} sujeitos)")
    return path


def resolve_dataset_path(path: Path) -> Path:
    """Caminhos relativos inexistentes são procurados sob AM_DATA_DIR."""
    path = Path(path)
    if path.exists() or path.is_absolute():
        return path
    candidate = get_data_root() / path
    return candidate if candidate.exists() else path


def verify_checksums(path: Path, manifest: Dict[str, Any]) -> None:
    """
    Raises:
        DatasetError: arquivo ausente ou com hash divergente
    """
    for rel, expected in sorted(manifest.get("checksums", {}).items()):
        file_path = path / rel
        if not file_path.is_file():
            raise DatasetError("Arquivo listado no manifest não encontrado", file_path)
        if sha256_file(file_path) != expected:
            raise DatasetError("Checksum divergente", file_path)


def load_dataset(path: Path, verify: bool = True) -> Dataset:
    """
    Carrega um dataset salvo por save_dataset.

    Raises:
        DatasetError: manifest corrompido, checksum divergente ou VOLB inválido
    """
    path = resolve_dataset_path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError("Manifest do dataset não encontrado", manifest_path)
    manifest = read_json(manifest_path, DatasetError)
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"Formato de dataset desconhecido: {manifest.get('format')}", manifest_path)
    if verify:
        verify_checksums(path, manifest)

    try:
        n_labels = int(manifest["n_labels"])
        spacing = tuple(manifest["grid"]["spacing"]) if manifest["grid"] else ()
        spec = PopulationSpec(**manifest["spec"]) if manifest.get("spec") else None
        entries = manifest["subjects"]
    except (KeyError, TypeError, ValueError):
        raise DatasetError("Manifest com campos inválidos", manifest_path)

    subjects = []
    for entry in entries:
        try:
            sid = entry["id"]
            record = AttributeRecord.create(entry["age"], entry["sex"], entry.get("extras") or {})
            volumes = np.asarray(entry["volumes"], dtype=np.int64)
        except (KeyError, TypeError, ValueError):
            raise DatasetError("Entrada de sujeito inválida no manifest", manifest_path)
        image = volume_io.read_volume(path / _image_rel(sid), spacing)
        labels = volume_io.read_labels(path / _labels_rel(sid), n_labels, spacing)
        subjects.append(Subject(sid, record, image, labels, volumes, entry.get("metadata") or {}))

    logger.info(f"Dataset carregado de {path} ({len(subjects)} sujeitos)")
    return Dataset(subjects, spec)


def read_attributes_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def load_split(path: Path, split_name: Optional[str], fractions, seed: int) -> Dataset:
    """Carrega o dataset e devolve a partição pedida (ou tudo com None)."""
    dataset = load_dataset(path)
    if split_name is None or split_name == "all":
        return dataset
    parts = split(dataset, fractions, seed)
    if split_name not in parts:
        raise DatasetError(f"Partição desconhecida: {split_name}", path)
    return parts[split_name]
