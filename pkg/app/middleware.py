"""
Middleware do visualizador Atlas Lab.

Inclui:
- Validação de Origin nas requisições POST (o visualizador só atende localhost)
- Rate limiting da renderização de templates
"""

from collections import defaultdict
from time import time
from typing import Callable, Optional

from fastapi import HTTPException, Request, Response
from starlette.middleware.base import BaseHTTPMiddleware
from starlette.responses import JSONResponse

_LOCAL_PREFIXES = (
    "http://127.0.0.1",
    "http://localhost",
    "https://127.0.0.1",
    "https://localhost",
)


def is_local_origin(origin: Optional[str]) -> bool:
    """Sem Origin (curl, TestClient) ou qualquer porta de localhost."""
    if not origin:
        return True
    return any(origin == p or origin.startswith(p + ":") or origin.startswith(p + "/") for p in _LOCAL_PREFIXES)


class LocalOriginMiddleware(BaseHTTPMiddleware):
    """Rejeita com 403 POSTs vindos de páginas que não são localhost."""

    async def dispatch(self, request: Request, call_next: Callable) -> Response:
        if request.method in ("POST", "PUT", "DELETE", "PATCH"):
            if not is_local_origin(request.headers.get("origin")):
                return JSONResponse(
                    status_code=403,
                    content={"detail": "Origin não permitido. Requisições devem vir de localhost."},
                )
        return await call_next(request)


# =============================================================================
# Rate limiting
# =============================================================================

class RateLimiter:
    """Janela deslizante em memória."""

    def __init__(self, max_requests: int, window_seconds: int):
        self.max_requests = max_requests
        self.window = window_seconds
        self.requests: dict[str, list[float]] = defaultdict(list)

    def is_allowed(self, key: str = "global") -> bool:
        now = time()
        self.requests[key] = [t for t in self.requests[key] if now - t < self.window]
        if len(self.requests[key]) >= self.max_requests:
            return False
        self.requests[key].append(now)
        return True

    def get_retry_after(self, key: str = "global") -> Optional[int]:
        if not self.requests[key]:
            return None
        oldest = min(self.requests[key])
        return max(0, int(self.window - (time() - oldest)) + 1)


# Renderização roda o decoder completo: 30 por minuto
render_limiter = RateLimiter(max_requests=30, window_seconds=60)


def check_rate_limit(limiter: RateLimiter, key: str = "global") -> None:
    """
    Raises:
        HTTPException: 429 se o limite foi excedido
    """
    if not limiter.is_allowed(key):
        retry_after = limiter.get_retry_after(key)
        raise HTTPException(
            status_code=429,
            detail=f"Muitas requisições. Tente novamente em {retry_after} segundos.",
            headers={"Retry-After": str(retry_after)} if retry_after else None,
        )
