"""HTTP service exposing the agent, retrieval, and dataset statistics.

Error contract: every non-200 body is {"code", "message", "detail?"} with
the code drawn from ERROR_CODES; stack traces never leak. POST /chat is
the only mutating endpoint. No authentication — this is a deployment-local
tool; put a reverse proxy in front for anything shared.
"""

from __future__ import annotations

import threading
from typing import Any

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .agent import (
    PROFILES,
    AgentConfig,
    AgentTurnError,
    Session,
    SessionStore,
    handle_turn,
)
from .config import EngineConfig, build_gateway
from .corpus import Passage, load_passages
from .errors import EngineError
from .gateway import Gateway, HttpGateway, StubGateway
from .records import compute_stats, load_dataset
from .retrieval import VectorIndex, load_index, query

SNIPPET_CHARS = 200

ERROR_STATUS = {
    "empty_text": 422,
    "bad_request": 422,
    "session_busy": 409,
    "session_not_found": 404,
    "dataset_absent": 404,
    "gateway_unavailable": 503,
    "index_unavailable": 503,
    "internal_error": 500,
}
ERROR_CODES = frozenset(ERROR_STATUS)


class ApiError(Exception):
    def __init__(self, code: str, message: str, detail: Any = None):
        assert code in ERROR_CODES, f"unmapped error code: {code}"
        super().__init__(message)
        self.code = code
        self.message = message
        self.detail = detail


class ChatBody(BaseModel):
    session_id: str | None = None
    text: str
    image_summary: str | None = None
    profile: str | None = None


class RetrieveBody(BaseModel):
    text: str
    k: int | None = Field(default=None, ge=1)


class Citation(BaseModel):
    passage_id: str
    doc_id: str
    score: float
    snippet: str


class ChatReply(BaseModel):
    session_id: str
    kind: str
    text: str
    citations: list[Citation]
    grounded: bool


class RetrieveHit(BaseModel):
    passage_id: str
    doc_id: str
    score: float
    rank: int
    snippet: str


class RetrieveReply(BaseModel):
    k: int
    hits: list[RetrieveHit]


class ServiceState:
    """Everything the endpoints read: loaded artifacts plus session locks.

    Any artifact may be absent; endpoints that need it fail with a 503/404
    rather than at startup, and /health reports the degradation.
    """

    def __init__(
        self,
        config: EngineConfig,
        gateway: Gateway | None,
        index: VectorIndex | None,
        passages: dict[str, Passage],
        dataset: list | None,
        store: SessionStore,
    ):
        self.config = config
        self.gateway = gateway
        self.index = index
        self.passages = passages
        self.dataset = dataset
        self.store = store
        self.agent_config = AgentConfig(
            top_k=config.top_k,
            context_char_budget=config.context_char_budget,
            clarification_score_threshold=config.clarification_score_threshold,
        )
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    @classmethod
    def from_config(cls, config: EngineConfig, stub_seed: int | None = None) -> "ServiceState":
        try:
            gateway = build_gateway(config, stub_seed=stub_seed)
        except EngineError:
            gateway = None
        index = load_index(config.index_path) if config.index_path.exists() else None
        passages = (
            {p.passage_id: p for p in load_passages(config.passages_path)}
            if config.passages_path.exists()
            else {}
        )
        dataset = load_dataset(config.dataset_path) if config.dataset_path.exists() else None
        store = SessionStore(config.sessions_dir)
        return cls(config, gateway, index, passages, dataset, store)

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    @property
    def gateway_mode(self) -> str:
        if self.gateway is None:
            return "absent"
        if isinstance(self.gateway, StubGateway):
            return "stub"
        if isinstance(self.gateway, HttpGateway):
            return "http"
        return type(self.gateway).__name__.lower()


def _snippet(text: str) -> str:
    return text[:SNIPPET_CHARS]


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="gsi-engine", version=__version__)
    if state.config.cors_origins:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=state.config.cors_origins,
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError) -> JSONResponse:
        body = {"code": exc.code, "message": exc.message}
        if exc.detail is not None:
            body["detail"] = exc.detail
        return JSONResponse(status_code=ERROR_STATUS[exc.code], content=body)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_request: Request, exc: RequestValidationError) -> JSONResponse:
        detail = [
            {"loc": [str(part) for part in error.get("loc", [])], "type": error.get("type", "")}
            for error in exc.errors()
        ]
        return JSONResponse(
            status_code=422,
            content={"code": "bad_request", "message": "invalid request body", "detail": detail},
        )

    @app.exception_handler(EngineError)
    async def _engine_error(_request: Request, exc: EngineError) -> JSONResponse:
        return JSONResponse(
            status_code=500, content={"code": "internal_error", "message": str(exc)}
        )

    @app.post("/chat", response_model=ChatReply)
    def chat(body: ChatBody) -> ChatReply:
        if not body.text.strip():
            raise ApiError("empty_text", "text must be non-empty")
        if body.profile is not None and body.profile not in PROFILES:
            raise ApiError("bad_request", f"unknown profile: {body.profile!r}")
        if state.gateway is None:
            raise ApiError("gateway_unavailable", "no model gateway configured")
        if state.index is None:
            raise ApiError("index_unavailable", "no vector index loaded")

        if body.session_id is None:
            session = state.store.create(profile=body.profile)
        elif state.store.exists(body.session_id):
            session = state.store.load(body.session_id)
        else:
            raise ApiError("session_not_found", f"no such session: {body.session_id}")

        lock = state.lock_for(session.session_id)
        if not lock.acquire(blocking=False):
            raise ApiError("session_busy", "another turn is in flight for this session")
        try:
            try:
                response = handle_turn(
                    session,
                    body.text,
                    state.agent_config,
                    state.index,
                    state.gateway,
                    state.passages,
                    image_summary=body.image_summary,
                )
            except AgentTurnError as exc:
                if exc.code == "empty_text":
                    raise ApiError("empty_text", str(exc)) from exc
                raise ApiError("gateway_unavailable", str(exc)) from exc
            state.store.append_turn(session, body.text, response)
        finally:
            lock.release()

        scores = {hit.passage_id: hit.score for hit in response.retrieval_trace}
        citations = [
            Citation(
                passage_id=pid,
                doc_id=state.passages[pid].doc_id,
                score=scores.get(pid, 0.0),
                snippet=_snippet(state.passages[pid].text),
            )
            for pid in response.citations
        ]
        return ChatReply(
            session_id=session.session_id,
            kind=response.kind,
            text=response.text,
            citations=citations,
            grounded=bool(response.constraint_flags.get("grounded", False)),
        )

    @app.post("/retrieve", response_model=RetrieveReply)
    def retrieve(body: RetrieveBody) -> RetrieveReply:
        if not body.text.strip():
            raise ApiError("empty_text", "text must be non-empty")
        if state.index is None:
            raise ApiError("index_unavailable", "no vector index loaded")
        if state.gateway is None:
            raise ApiError("gateway_unavailable", "no model gateway configured")
        k = body.k if body.k is not None else state.config.top_k
        try:
            vector = state.gateway.embed([body.text])[0]
            hits = query(state.index, vector, k)
        except EngineError as exc:
            raise ApiError("gateway_unavailable", str(exc)) from exc
        return RetrieveReply(
            k=k,
            hits=[
                RetrieveHit(
                    passage_id=hit.passage_id,
                    doc_id=state.passages[hit.passage_id].doc_id if hit.passage_id in state.passages else "",
                    score=hit.score,
                    rank=hit.rank,
                    snippet=_snippet(state.passages[hit.passage_id].text) if hit.passage_id in state.passages else "",
                )
                for hit in hits
            ],
        )

    @app.get("/health")
    def health() -> dict:
        index_info: Any = "absent"
        if state.index is not None:
            documents = len({state.passages[pid].doc_id for pid in state.index.passage_ids if pid in state.passages})
            index_info = {"passages": len(state.index), "documents": documents, "dim": state.index.dim}
        degraded = state.gateway is None or state.index is None
        return {
            "status": "degraded" if degraded else "ok",
            "version": __version__,
            "gateway": state.gateway_mode,
            "index": index_info,
            "dataset": {"records": len(state.dataset)} if state.dataset else "absent",
        }

    @app.get("/stats")
    def stats() -> dict:
        if not state.dataset:
            raise ApiError("dataset_absent", "no dataset configured")
        return compute_stats(state.dataset).to_json_dict()

    @app.get("/session/{session_id}")
    def session_history(session_id: str) -> dict:
        if not state.store.exists(session_id):
            raise ApiError("session_not_found", f"no such session: {session_id}")
        session: Session = state.store.load(session_id)
        return {
            "session_id": session.session_id,
            "profile": session.profile,
            "created_at": session.created_at,
            "turns": [
                {"user_text": user_text, "response": response.to_json_dict()}
                for user_text, response in session.turns
            ],
        }

    return app
