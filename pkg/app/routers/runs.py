"""
Router para as execuções gravadas em disco.

Endpoints:
- GET /api/runs - Lista execuções (mais recentes primeiro)
- GET /api/runs/{run_id}/losses - Curva de loss do treino
"""

import asyncio
import csv
from pathlib import Path
from typing import List, Optional

from fastapi import APIRouter, HTTPException, Request
from pydantic import BaseModel

from app.config import DEFAULT_OUTPUT_DIR
from app.services.exceptions import DatasetError
from app.services.run_manager import find_run, list_runs
from app.services.trainer import LOSSES_NAME

router = APIRouter(prefix="/api/runs", tags=["runs"])


# ============================================
# Pydantic Models
# ============================================


class RunResponse(BaseModel):
    id: str
    command: str
    status: str
    created_at: str
    finished_at: Optional[str] = None
    version: str
    files: List[str]


class LossRow(BaseModel):
    step: int
    epoch: int
    img: float
    seg: float
    smooth: float
    central: float
    total: float
    anchor: str = ""


class LossesResponse(BaseModel):
    run_id: str
    rows: List[LossRow]


# ============================================
# Helpers
# ============================================


def runs_root(request: Request) -> Path:
    """Raiz configurada pelo `serve` (app.state.runs_dir) ou a padrão."""
    return Path(getattr(request.app.state, "runs_dir", DEFAULT_OUTPUT_DIR))


def _read_losses(path: Path) -> List[LossRow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [LossRow(**row) for row in csv.DictReader(f)]


# ============================================
# Endpoints
# ============================================


@router.get("", response_model=List[RunResponse])
async def get_runs(request: Request):
    runs = await asyncio.to_thread(list_runs, runs_root(request))
    return [RunResponse(**r.to_dict()) for r in runs]


@router.get("/{run_id}/losses", response_model=LossesResponse)
async def get_losses(run_id: str, request: Request):
    """
    Linhas de losses.csv da execução.

    Execuções de ablação guardam uma curva por subdiretório; só a curva
    da raiz é servida.
    """
    try:
        run_dir = find_run(runs_root(request), run_id)
    except DatasetError as e:
        raise HTTPException(status_code=404, detail=str(e))

    path = run_dir / LOSSES_NAME
    if not path.is_file():
        raise HTTPException(status_code=404, detail="Execução sem curva de loss")
    rows = await asyncio.to_thread(_read_losses, path)
    return LossesResponse(run_id=run_id, rows=rows)
