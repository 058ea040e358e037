"""FastAPI application: POST /embed and GET /health."""

from __future__ import annotations

import os
from contextlib import asynccontextmanager
from typing import Any

from fastapi import FastAPI, Header, HTTPException, Request
from fastapi.responses import JSONResponse

from .encoder import MODEL_ID, embed_batch

DEFAULT_BATCH_LIMIT = 128


def create_app(
    model_id: str | None = None,
    batch_limit: int | None = None,
    token: str | None = None,
) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        # the hashed encoder needs no weights; readiness still gates requests
        # so clients see a proper 503 during process start
        app.state.ready = True
        yield
        app.state.ready = False

    app = FastAPI(title="embed-service", lifespan=lifespan)
    app.state.model_id = model_id or os.environ.get("EMBED_MODEL_ID", MODEL_ID)
    app.state.batch_limit = batch_limit or int(
        os.environ.get("EMBED_BATCH_LIMIT", DEFAULT_BATCH_LIMIT)
    )
    app.state.token = token if token is not None else os.environ.get("EMBED_TOKEN")
    app.state.ready = False

    def _check_auth(authorization: str | None) -> None:
        if app.state.token is None:
            return
        if authorization != f"Bearer {app.state.token}":
            raise HTTPException(status_code=401, detail="missing or invalid token")

    @app.get("/health")
    def health() -> JSONResponse:
        if not app.state.ready:
            return JSONResponse({"status": "loading"}, status_code=503)
        return JSONResponse({"status": "ok", "model_id": app.state.model_id})

    @app.post("/embed")
    async def embed(request: Request, authorization: str | None = Header(default=None)):
        _check_auth(authorization)
        if not app.state.ready:
            raise HTTPException(status_code=503, detail="model is loading")
        try:
            body: Any = await request.json()
        except Exception as exc:
            raise HTTPException(status_code=400, detail="body must be JSON") from exc
        texts = body.get("texts") if isinstance(body, dict) else None
        if not isinstance(texts, list) or not texts:
            raise HTTPException(status_code=400, detail="texts must be a nonempty list")
        if len(texts) > app.state.batch_limit:
            raise HTTPException(
                status_code=400,
                detail=f"batch of {len(texts)} exceeds the limit of {app.state.batch_limit}",
            )
        if any(not isinstance(t, str) or not t for t in texts):
            raise HTTPException(status_code=400, detail="every text must be a nonempty string")
        return {"vectors": embed_batch(texts), "model_id": app.state.model_id}

    return app


app = create_app()
