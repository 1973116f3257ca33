"""
Atlas Lab - visualizador local dos experimentos.

Execute com: python -m app.main  (ou `atlas-lab serve`)
Abre em http://127.0.0.1:8000; somente leitura, sem treino via HTTP.
"""

import logging
import webbrowser
from contextlib import asynccontextmanager

import uvicorn
from fastapi import FastAPI, Request, Response

from app.__version__ import __version__
from app.config import HEADLESS, HOST, PORT
from app.logging_config import setup_logging
from app.middleware import LocalOriginMiddleware
from app.routers import runs as runs_router
from app.routers import templates as templates_router


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Startup: logging e browser (se não headless). Shutdown: descarta o modelo em cache."""
    setup_logging()
    logger = logging.getLogger(__name__)
    logger.info("Atlas Lab viewer starting...")

    if not HEADLESS:
        webbrowser.open(f"http://{HOST}:{PORT}/docs")

    yield

    templates_router.clear_cache()
    logger.info("Shutting down...")


app = FastAPI(
    title="Atlas Lab",
    description="Visualizador de templates deformáveis condicionais",
    version=__version__,
    lifespan=lifespan,
)

app.add_middleware(LocalOriginMiddleware)


# Headers de segurança HTTP
@app.middleware("http")
async def add_security_headers(request: Request, call_next):
    response: Response = await call_next(request)
    response.headers["X-Frame-Options"] = "DENY"
    response.headers["X-Content-Type-Options"] = "nosniff"
    response.headers["Referrer-Policy"] = "strict-origin-when-cross-origin"
    return response


app.include_router(runs_router.router)
app.include_router(templates_router.router)


@app.get("/api/health")
async def health():
    return {"status": "ok", "version": __version__}


def run_app():
    setup_logging()
    logging.getLogger(__name__).info(f"Atlas Lab viewer em http://{HOST}:{PORT}")
    uvicorn.run(app, host=HOST, port=PORT, log_level="warning")


if __name__ == "__main__":
    run_app()
