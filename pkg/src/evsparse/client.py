"""Synchronous client for the inference service.

Without a server URL the client mounts the FastAPI app in-process over an
ASGI transport, so the same HTTP surface (validation included) serves both
local one-shot commands and remote deployments.
"""

from __future__ import annotations

import asyncio

import httpx

__all__ = ["ServiceClient", "ServiceError"]


class ServiceError(RuntimeError):
    def __init__(self, status_code: int, detail: str):
        super().__init__(f"service error {status_code}: {detail}")
        self.status_code = status_code
        self.detail = detail


class ServiceClient:
    def __init__(self, server: str | None = None, timeout: float = 600.0):
        self.server = server
        self.timeout = timeout
        self._app = None
        if server is None:
            from evsparse.service import create_app

            self._app = create_app()

    def request(self, method: str, path: str, payload: dict | None = None) -> dict:
        if self.server:
            with httpx.Client(base_url=self.server, timeout=self.timeout) as client:
                response = client.request(method, path, json=payload)
        else:
            response = asyncio.run(self._asgi_request(method, path, payload))
        if response.status_code >= 400:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise ServiceError(response.status_code, str(detail))
        return response.json()

    async def _asgi_request(self, method: str, path: str, payload: dict | None):
        transport = httpx.ASGITransport(app=self._app)
        async with httpx.AsyncClient(transport=transport, base_url="http://evsparse", timeout=self.timeout) as client:
            return await client.request(method, path, json=payload)

    def post(self, path: str, payload: dict | None = None) -> dict:
        return self.request("POST", path, payload)

    def get(self, path: str) -> dict:
        return self.request("GET", path)

    def delete(self, path: str) -> dict:
        return self.request("DELETE", path)
