"""HTTP prediction service with atomic hot reload."""
from __future__ import annotations

import hmac
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Callable

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..errors import HosputilError
from .artifact import FeatureError, Scorer, read_artifact

log = logging.getLogger(__name__)

TOKEN_ENV = "HOSPUTIL_ADMIN_TOKEN"
CHECKSUM_HEADER = "X-Model-Checksum"


class QueueFull(Exception):
    """A pipeline run is already pending with a different source hint."""


class ModelHolder:
    """Owns the current immutable Scorer. Readers take one reference per request."""

    def __init__(self, artifact_path: str | Path | None):
        self.artifact_path = Path(artifact_path) if artifact_path else None
        self._snapshot: Scorer | None = None
        self._reload_lock = threading.Lock()
        self.last_error: str | None = None

    @property
    def snapshot(self) -> Scorer | None:
        return self._snapshot

    def reload(self) -> Scorer:
        """Load and verify the artifact, then publish it with a single reference assignment."""
        if self.artifact_path is None:
            raise FileNotFoundError("no artifact path configured")
        with self._reload_lock:
            try:
                scorer = Scorer(read_artifact(self.artifact_path))
            except (OSError, HosputilError) as exc:
                self.last_error = str(exc)
                raise
            self._snapshot = scorer
            self.last_error = None
            return scorer

    def try_reload(self) -> bool:
        try:
            self.reload()
            return True
        except (OSError, HosputilError) as exc:
            log.warning("artifact reload failed: %s", exc)
            return False


def _token_ok(request: Request, token: str | None) -> bool:
    if not token:
        return False
    supplied = request.headers.get("x-admin-token") or ""
    auth = request.headers.get("authorization") or ""
    if auth.lower().startswith("bearer "):
        supplied = supplied or auth[7:].strip()
    return hmac.compare_digest(supplied.encode(), token.encode())


def create_app(artifact_path: str | Path | None, admin_token: str | None = None,
               notifier: Callable[[str | None], str] | None = None, load: bool = True) -> FastAPI:
    """Build the service. ``notifier(hint)`` enqueues a pipeline run and returns "queued" or "coalesced"."""
    token = admin_token if admin_token is not None else os.environ.get(TOKEN_ENV)
    holder = ModelHolder(artifact_path)
    if load and artifact_path and Path(artifact_path).exists():
        holder.try_reload()

    app = FastAPI(title="hosputil", docs_url=None, redoc_url=None)
    app.state.holder = holder
    app.state.notifier = notifier

    def reply(status: int, body: dict, scorer: Scorer | None) -> JSONResponse:
        checksum = scorer.checksum if scorer else ""
        body = {**body, "model_checksum": checksum or None}
        return JSONResponse(body, status_code=status, headers={CHECKSUM_HEADER: checksum})

    @app.get("/healthz")
    def healthz():
        s = holder.snapshot
        return reply(200, {"status": "ok", "model_loaded": s is not None}, s)

    @app.get("/model")
    def model():
        s = holder.snapshot
        if s is None:
            return reply(503, {"error": "no valid model loaded"}, None)
        a = s.artifact
        return reply(200, {"outcome": a.outcome, "feature_schema": list(a.feature_schema),
                           "metrics": a.train_metrics, "created_at": a.created_at,
                           "data_manifest_hash": a.data_manifest_hash, "format_version": a.format_version}, s)

    @app.post("/predict")
    async def predict(request: Request):
        s = holder.snapshot
        if s is None:
            return reply(503, {"error": "no valid model loaded"}, None)
        try:
            features = await request.json()
        except ValueError:
            return reply(400, {"error": "request body is not valid JSON", "field": None}, s)
        try:
            p = s.predict(features)
        except FeatureError as exc:
            return reply(exc.status, {"error": str(exc), "field": exc.field}, s)
        return reply(200, {"probability": p, "high_utilization": p >= 0.5}, s)

    @app.post("/admin/reload")
    def admin_reload(request: Request):
        if not _token_ok(request, token):
            return reply(401, {"error": "bad or missing admin token"}, holder.snapshot)
        try:
            s = holder.reload()
        except (OSError, HosputilError) as exc:
            return reply(409, {"error": f"reload failed, keeping current model: {exc}"}, holder.snapshot)
        return reply(200, {"status": "reloaded"}, s)

    @app.post("/notify")
    async def notify(request: Request):
        if not _token_ok(request, token):
            return reply(401, {"error": "bad or missing admin token"}, holder.snapshot)
        if notifier is None:
            return reply(503, {"error": "no watcher attached"}, holder.snapshot)
        hint = None
        body = await request.body()
        if body:
            try:
                doc = json.loads(body)
            except ValueError:
                return reply(400, {"error": "request body is not valid JSON", "field": None}, holder.snapshot)
            if isinstance(doc, dict):
                hint = doc.get("manifest")
        try:
            status = notifier(hint)
        except QueueFull as exc:
            return reply(429, {"error": str(exc)}, holder.snapshot)
        return reply(202, {"status": status}, holder.snapshot)

    return app


class ServerThread:
    """Run a uvicorn server on a background thread; port 0 picks a free port."""

    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 0):
        import uvicorn

        config = uvicorn.Config(app, host=host, port=port, log_level="warning", access_log=False)
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.host = host
        self.port = port

    def start(self, timeout: float = 10.0) -> "ServerThread":
        self.thread.start()
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if time.monotonic() > deadline or not self.thread.is_alive():
                raise RuntimeError("server failed to start")
            time.sleep(0.01)
        self.port = self.server.servers[0].sockets[0].getsockname()[1]
        return self

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=10)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
