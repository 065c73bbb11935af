"""Turn-level agent pipeline: retrieve, assemble context, generate under
the soft constraints, check groundedness, or ask a clarification question.

The constraints are soft by design: a response that fails the groundedness
proxy is flagged, never blocked.
"""

from __future__ import annotations

import json
import re
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .corpus import Passage
from .errors import EngineError
from .gateway import Gateway, user_request
from .metrics import tokenize
from .retrieval import DEFAULT_TOP_K, RetrievalHit, VectorIndex, query
from .sft import utc_now_rfc3339

PROFILES = ("engineer", "planner", "maintenance", "resident")

DEFAULT_CLARIFICATION_THRESHOLD = 0.35
DEFAULT_CONTEXT_BUDGET = 4000
DEFAULT_MAX_HISTORY_TURNS = 6

# Query terms that mark a question as clearly on-topic even when corpus
# coverage (and therefore retrieval score) is thin.
DOMAIN_KEYWORDS = frozenset(
    {
        "stormwater", "gsi", "smp", "runoff", "drainage", "sewer", "inlet", "outlet",
        "rain", "garden", "basin", "bioretention", "bioswale", "swale", "infiltration",
        "permeable", "pervious", "porous", "pavement", "cistern", "trench", "planter",
        "green", "roof", "wetland", "detention", "retention", "maintenance", "inspection",
        "sediment", "vegetation", "clogging", "mosquito", "overflow", "pretreatment",
    }
)

CLARIFICATION_TEXT = (
    "Could you clarify which facility or topic your question concerns, "
    "for example permeable pavement, a rain garden, or a bioretention basin?"
)

_CONSTRAINT_BLOCK = (
    "Follow these rules in every reply:\n"
    "1. Use the retrieved reference passages when they are relevant, and point to them "
    "with their [S#] tags.\n"
    "2. Never invent regulations, technical standards, or numeric requirements that are "
    "not present in the provided passages.\n"
    "3. If critical information is missing from the question, ask one concise "
    "clarification question instead of guessing."
)

_PROFILE_TONE = {
    "engineer": "Answer for a professional engineer: use precise technical vocabulary and quantitative detail.",
    "planner": "Answer for an urban planner: emphasize siting, compliance, and program-level guidance.",
    "maintenance": "Answer for field maintenance staff: give step-by-step, checklist-style guidance.",
    "resident": "Answer for a resident: use plain language and avoid jargon.",
    None: "Answer in a clear, professional tone.",
}

_TEMPLATES = {
    "default": "You are an assistant for green stormwater infrastructure planning, inspection, and maintenance.\n\n{constraints}\n\n{tone}"
}


class AgentError(EngineError):
    code = "agent_error"


class NoHits(AgentError):
    def __init__(self):
        super().__init__("no retrieval hits to assemble")


class UnknownTemplate(AgentError):
    def __init__(self, template_id: str):
        super().__init__(f"unknown system prompt template: {template_id!r}")


class UnknownProfile(AgentError):
    def __init__(self, profile: str):
        super().__init__(f"unknown profile: {profile!r}")


class AgentTurnError(AgentError):
    """Structured turn failure; the session is left untouched."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class AgentConfig:
    top_k: int = DEFAULT_TOP_K
    context_char_budget: int = DEFAULT_CONTEXT_BUDGET
    clarification_score_threshold: float = DEFAULT_CLARIFICATION_THRESHOLD
    system_prompt_template: str = "default"
    max_history_turns: int = DEFAULT_MAX_HISTORY_TURNS
    domain_keywords: frozenset[str] = DOMAIN_KEYWORDS

    def __post_init__(self):
        if self.top_k < 1:
            raise AgentError("top_k must be >= 1")
        if self.context_char_budget <= 0:
            raise AgentError("context_char_budget must be positive")
        if not 0.0 <= self.clarification_score_threshold <= 1.0:
            raise AgentError("clarification_score_threshold must be in [0, 1]")


@dataclass(frozen=True)
class AgentResponse:
    kind: str  # "answer" | "clarification"
    text: str
    citations: tuple[str, ...]
    retrieval_trace: tuple[RetrievalHit, ...]
    constraint_flags: Mapping[str, bool]

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "text": self.text,
            "citations": list(self.citations),
            "retrieval_trace": [
                {"passage_id": h.passage_id, "score": h.score, "rank": h.rank}
                for h in self.retrieval_trace
            ],
            "constraint_flags": dict(self.constraint_flags),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "AgentResponse":
        return cls(
            kind=doc["kind"],
            text=doc["text"],
            citations=tuple(doc["citations"]),
            retrieval_trace=tuple(
                RetrievalHit(h["passage_id"], h["score"], h["rank"]) for h in doc["retrieval_trace"]
            ),
            constraint_flags=dict(doc["constraint_flags"]),
        )


@dataclass
class Session:
    """Append-only conversation state for one user."""

    session_id: str
    profile: str | None = None
    created_at: str = ""
    turns: list[tuple[str, AgentResponse]] = field(default_factory=list)


def build_system_prompt(profile: str | None = None, template_id: str = "default") -> str:
    """System prompt = constraint block (shared byte-for-byte across
    profiles) plus one profile-specific tone line."""
    if template_id not in _TEMPLATES:
        raise UnknownTemplate(template_id)
    if profile is not None and profile not in _PROFILE_TONE:
        raise UnknownProfile(profile)
    return _TEMPLATES[template_id].format(constraints=_CONSTRAINT_BLOCK, tone=_PROFILE_TONE[profile])


def compose_query(user_text: str, image_summary: str | None = None) -> str:
    """Join the text query with an optional pre-computed image summary."""
    if image_summary and image_summary.strip():
        return f"{user_text}\n\n{image_summary}"
    return user_text


def _citation_tag(rank: int, passage_id: str) -> str:
    return f"[S{rank}: {passage_id}]"


def assemble_context(
    hits: Sequence[RetrievalHit],
    passages: Mapping[str, Passage],
    budget: int,
) -> tuple[str, list[str]]:
    """Concatenate passages in rank order under a character budget.

    The budget applies to passage text; citation tags are overhead on top.
    Whole passages are included while they fit; the top hit is always
    included, hard-truncated if it alone exceeds the budget. Returns the
    context block and the passage_ids actually included.
    """
    if not hits:
        raise NoHits()
    blocks: list[str] = []
    included: list[str] = []
    used = 0
    for hit in hits:
        passage = passages[hit.passage_id]
        text = passage.text
        if not blocks and len(text) > budget:
            text = text[:budget]
        elif used + len(text) > budget:
            break
        blocks.append(f"{_citation_tag(hit.rank, hit.passage_id)} {text}")
        included.append(hit.passage_id)
        used += len(text)
    return "\n\n".join(blocks), included


_TAG_RE = re.compile(r"\[S(\d+)(?::\s*([^\]]+))?\]")
_NUMERIC_TOKEN_RE = re.compile(r"\d")


def groundedness_check(answer: str, context_block: str) -> dict:
    """Conservative groundedness proxy.

    grounded is true iff at least one [S#] tag in the answer matches a tag
    in the context block AND every digit-bearing token of the answer also
    appears among the context's tokens. Returns the matched passage_ids as
    `cited`.
    """
    context_tags = {int(m.group(1)): (m.group(2) or "").strip() for m in _TAG_RE.finditer(context_block)}
    cited: list[str] = []
    for match in _TAG_RE.finditer(answer):
        rank = int(match.group(1))
        if rank in context_tags and context_tags[rank] not in ("", None):
            if context_tags[rank] not in cited:
                cited.append(context_tags[rank])
    context_tokens = set(tokenize(context_block))
    numbers_ok = all(
        token in context_tokens
        for token in tokenize(answer)
        if _NUMERIC_TOKEN_RE.search(token)
    )
    return {"grounded": bool(cited) and numbers_ok, "cited": cited}


def _has_domain_keyword(text: str, keywords: frozenset[str]) -> bool:
    return any(token in keywords for token in tokenize(text))


def handle_turn(
    session: Session,
    user_text: str,
    config: AgentConfig,
    index: VectorIndex,
    gateway: Gateway,
    passages: Mapping[str, Passage],
    image_summary: str | None = None,
) -> AgentResponse:
    """Run the fixed pipeline for one user turn and append it to the session.

    Retrieval always runs; the turn becomes a clarification question only
    when the best score is below the threshold AND the query carries no
    recognizable domain term. Gateway or index failures raise
    AgentTurnError and leave the session unchanged.
    """
    if not user_text.strip():
        raise AgentTurnError("empty_text", "user text is empty")
    retrieval_query = compose_query(user_text, image_summary)
    try:
        query_vector = gateway.embed([retrieval_query])[0]
        hits = query(index, query_vector, config.top_k)
    except EngineError as exc:
        raise AgentTurnError("retrieval_failed", str(exc)) from exc

    best = hits[0].score if hits else -1.0
    if best < config.clarification_score_threshold and not _has_domain_keyword(
        retrieval_query, config.domain_keywords
    ):
        response = AgentResponse(
            kind="clarification",
            text=CLARIFICATION_TEXT,
            citations=(),
            retrieval_trace=tuple(hits),
            constraint_flags={"used_retrieval": False, "grounded": False},
        )
        session.turns.append((user_text, response))
        return response

    context_block, included = assemble_context(hits, passages, config.context_char_budget)
    system_prompt = build_system_prompt(session.profile, config.system_prompt_template)
    history = [
        (user, reply.text)
        for user, reply in session.turns[-config.max_history_turns :]
    ]
    prompt = f"Reference passages:\n{context_block}\n\nQuestion: {user_text}"
    try:
        answer = gateway.chat(user_request(prompt, system=system_prompt, history=history)).text
    except EngineError as exc:
        raise AgentTurnError("generation_failed", str(exc)) from exc

    check = groundedness_check(answer, context_block)
    response = AgentResponse(
        kind="answer",
        text=answer,
        citations=tuple(included),
        retrieval_trace=tuple(hits),
        constraint_flags={"used_retrieval": True, "grounded": check["grounded"]},
    )
    session.turns.append((user_text, response))
    return response


class SessionStore:
    """jsonl-per-session persistence with write-ahead turn appends."""

    def __init__(
        self,
        data_dir: str | Path,
        clock: Callable[[], str] = utc_now_rfc3339,
        id_factory: Callable[[], str] = lambda: str(uuid.uuid4()),
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._clock = clock
        self._id_factory = id_factory
        self._lock = threading.Lock()

    def _path(self, session_id: str) -> Path:
        return self.data_dir / f"{session_id}.jsonl"

    def create(self, profile: str | None = None, session_id: str | None = None) -> Session:
        if profile is not None and profile not in PROFILES:
            raise UnknownProfile(profile)
        session = Session(
            session_id=session_id or self._id_factory(),
            profile=profile,
            created_at=self._clock(),
        )
        meta = {"session_id": session.session_id, "profile": session.profile, "created_at": session.created_at}
        with self._lock, open(self._path(session.session_id), "w", encoding="utf-8", newline="\n") as handle:
            handle.write(json.dumps(meta, ensure_ascii=False) + "\n")
        return session

    def exists(self, session_id: str) -> bool:
        return self._path(session_id).exists()

    def load(self, session_id: str) -> Session:
        path = self._path(session_id)
        if not path.exists():
            raise AgentError(f"no such session: {session_id}")
        with open(path, encoding="utf-8") as handle:
            meta = json.loads(handle.readline())
            session = Session(
                session_id=meta["session_id"],
                profile=meta.get("profile"),
                created_at=meta.get("created_at", ""),
            )
            for line in handle:
                if not line.strip():
                    continue
                row = json.loads(line)
                session.turns.append((row["user_text"], AgentResponse.from_json_dict(row["response"])))
        return session

    def append_turn(self, session: Session, user_text: str, response: AgentResponse) -> None:
        row = {"user_text": user_text, "response": response.to_json_dict()}
        with self._lock, open(self._path(session.session_id), "a", encoding="utf-8") as handle:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
