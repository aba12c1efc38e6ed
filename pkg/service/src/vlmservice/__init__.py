"""Prior-extraction HTTP service: /prior (POST) and /health (GET)."""

from .server import PriorService, ServiceConfig

__all__ = ["PriorService", "ServiceConfig"]
