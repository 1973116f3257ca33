"""
Router para pré-visualização de templates.

Endpoints:
- POST /api/template - PNG do template para os atributos pedidos, a partir
  do checkpoint indicado em AM_CHECKPOINT
"""

import asyncio
import logging
import os
import threading
from pathlib import Path
from typing import Dict, Optional, Tuple

from fastapi import APIRouter, HTTPException
from fastapi.responses import Response
from pydantic import BaseModel, Field

from app.config import CHECKPOINT_ENV
from app.middleware import check_rate_limit, render_limiter
from app.services import reports
from app.services.attributes import AttributeRecord
from app.services.exceptions import AtlasError, CheckpointError
from app.services.models import AtlasModel, load_model

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api", tags=["template"])

# Cache do modelo carregado: (caminho, mtime) -> modelo
_lock = threading.Lock()
_cache: Dict[Tuple[str, float], AtlasModel] = {}


class TemplateRequest(BaseModel):
    age: float
    sex: str = "F"
    extras: Dict[str, str] = Field(default_factory=dict)
    scale: int = Field(4, ge=1, le=16)
    with_labels: bool = True


def get_model() -> AtlasModel:
    """
    Modelo do checkpoint em AM_CHECKPOINT (recarregado se o arquivo mudar).

    Raises:
        CheckpointError: variável ausente ou arquivo inexistente
    """
    value = os.environ.get(CHECKPOINT_ENV)
    if not value:
        raise CheckpointError(f"{CHECKPOINT_ENV} não definido")
    path = Path(value)
    if not path.is_file():
        raise CheckpointError("Checkpoint não encontrado", path)
    key = (str(path.resolve()), path.stat().st_mtime)
    with _lock:
        if key not in _cache:
            _cache.clear()
            _cache[key] = load_model(path)[0]
            logger.info(f"Checkpoint carregado para o visualizador: {path}")
        return _cache[key]


def clear_cache() -> None:
    with _lock:
        _cache.clear()


def render_template_png(model: AtlasModel, req: TemplateRequest) -> bytes:
    record = AttributeRecord.create(req.age, req.sex, req.extras or None)
    # strict: idade fora da faixa de treino vira 400
    template = model.template_for(record, strict=True)
    labels = [template.hard_labels().labels] if (req.with_labels and template.seg is not None) else None
    panel = reports.template_montage([template.intensity.data[0]], labels, model.config.n_labels)
    return reports.png_bytes(panel, req.scale)


@router.post("/template")
async def post_template(req: TemplateRequest):
    check_rate_limit(render_limiter)
    try:
        model = await asyncio.to_thread(get_model)
    except CheckpointError as e:
        raise HTTPException(status_code=404, detail=str(e))

    try:
        png = await asyncio.to_thread(render_template_png, model, req)
    except AtlasError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return Response(content=png, media_type="image/png")
