"""SFT record factory: prompt rendering, strict output parsing, enrichment.

The generation prompt ships as content-addressed template assets; every
batch manifest records the template hash so prompt drift is auditable.
"""

from __future__ import annotations

import hashlib
import json
import re
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from typing import Callable, Sequence

from .errors import EngineError
from .gateway import Gateway, user_request
from .metrics import tokenize
from .records import GsiRecord, TaskFamily, validate_record

MAX_DOCUMENT_CHARS = 24_000
GENERATION_TEMPERATURE = 0.7


class SftError(EngineError):
    code = "sft_error"


class EmptyDocument(SftError):
    def __init__(self):
        super().__init__("document text is empty")


class OversizeDocument(SftError):
    def __init__(self, size: int, budget: int):
        super().__init__(f"document of {size} chars exceeds the {budget}-char call budget", size=size, budget=budget)


class NotAnArray(SftError):
    def __init__(self, reason: str):
        super().__init__(f"reply is not a bare JSON array: {reason}")


class EmptyArray(SftError):
    def __init__(self):
        super().__init__("reply array has no elements")


class BadElement(SftError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"element {index}: {reason}", index=index, reason=reason)
        self.index = index
        self.reason = reason


@dataclass(frozen=True)
class RawGenSample:
    """One generated triple in the strict three-key output contract."""

    instruction: str
    input: str
    output: str


@dataclass
class GenBatchResult:
    accepted: list[GsiRecord]
    rejected: list[tuple[str, str]]
    doc_id: str
    prompt_hash: str


def _template(name: str) -> str:
    return resources.files("gsi_engine").joinpath(f"templates/{name}").read_text(encoding="utf-8")


def template_hash() -> str:
    """SHA-256 over both prompt template assets."""
    system = _template("sft_system.txt").encode("utf-8")
    user = _template("sft_user.txt").encode("utf-8")
    return hashlib.sha256(system + b"\x00" + user).hexdigest()


def render_sft_prompt(document_text: str, char_budget: int = MAX_DOCUMENT_CHARS) -> tuple[str, str]:
    """Render the generation prompt over one document's text.

    Returns (system message, user message); the user message is the fixed
    preamble with the document text appended.
    """
    if not document_text.strip():
        raise EmptyDocument()
    if len(document_text) > char_budget:
        raise OversizeDocument(len(document_text), char_budget)
    return _template("sft_system.txt"), _template("sft_user.txt") + "\n" + document_text


_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_-]*\n(.*)\n`{3}$", re.DOTALL)


def parse_generation(reply: str, recovery: bool = False) -> list[RawGenSample]:
    """Parse a model reply against the strict output contract.

    Strict mode accepts only a bare JSON array of objects with exactly the
    keys instruction/input/output. Recovery mode additionally strips a
    single surrounding markdown code fence; anything else rejects the
    reply whole.
    """
    text = reply.strip()
    if recovery:
        fenced = _FENCE_RE.match(text)
        if fenced:
            text = fenced.group(1).strip()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NotAnArray(exc.msg) from exc
    if not isinstance(data, list):
        raise NotAnArray(f"top-level value is {type(data).__name__}")
    if not data:
        raise EmptyArray()
    samples: list[RawGenSample] = []
    for index, element in enumerate(data):
        if not isinstance(element, dict):
            raise BadElement(index, f"expected object, got {type(element).__name__}")
        keys = set(element)
        if keys != {"instruction", "input", "output"}:
            raise BadElement(index, f"keys must be exactly instruction/input/output, got {sorted(keys)}")
        for key in ("instruction", "input", "output"):
            if not isinstance(element[key], str):
                raise BadElement(index, f"{key} must be a string")
        if not element["instruction"].strip():
            raise BadElement(index, "instruction is empty")
        if not element["output"].strip():
            raise BadElement(index, "output is empty")
        samples.append(RawGenSample(element["instruction"], element["input"], element["output"]))
    return samples


_TASK_KEYWORDS: tuple[tuple[TaskFamily, tuple[str, ...]], ...] = (
    (TaskFamily.INFORMATION_EXTRACTION, ("list ", "extract", "enumerate", "identify all", "name the")),
    (TaskFamily.CLASSIFICATION, ("classify", "categorize", "which category", "which type of", "which class")),
    (TaskFamily.VERIFICATION_JUDGMENT, ("verify", "is it true", "true or false", "judge whether", "determine whether", "confirm whether")),
    (TaskFamily.REWRITING_TRANSFORMATION, ("rewrite", "rephrase", "paraphrase", "transform", "convert the following")),
    (TaskFamily.REASONING_MATH_LOGIC, ("calculate", "compute", "how many", "what percentage", "estimate the")),
    (TaskFamily.CODE_PROGRAM_EXECUTION, ("write code", "write a script", "write a function", "program", "sql")),
    (TaskFamily.DIALOGUE_INTERACTION, ("continue the conversation", "respond to the user", "role-play")),
    (TaskFamily.GENERATION_COMPOSITION, ("write ", "compose", "draft", "generate a", "summarize", "describe the procedure")),
)


def classify_task(instruction: str) -> TaskFamily | None:
    """Keyword heuristic for task-family assignment; None when unsure."""
    lowered = instruction.lower()
    for family, keywords in _TASK_KEYWORDS:
        if any(keyword in lowered for keyword in keywords):
            return family
    return None


def utc_now_rfc3339() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def enrich(
    samples: Sequence[RawGenSample],
    source: str,
    location_tag: str = "",
    classifier: Callable[[str], TaskFamily | None] = classify_task,
    deployment_type: str = "fine-tuning",
    clock: Callable[[], str] = utc_now_rfc3339,
    id_factory: Callable[[], str] = lambda: str(uuid.uuid4()),
) -> list[GsiRecord]:
    """Fill the metadata envelope around raw samples.

    The classifier may abstain (return None), which defaults the family to
    question answering. Clock and id factory are injectable for tests.
    """
    records: list[GsiRecord] = []
    for sample in samples:
        family = classifier(sample.instruction) or TaskFamily.QUESTION_ANSWERING
        raw = {
            "_id": id_factory(),
            "_source": source,
            "_source_location": location_tag,
            "_task_type": family.value,
            "_deployment_type": deployment_type,
            "_created_at": clock(),
            "instruction": sample.instruction,
            "input": sample.input,
            "output": sample.output,
        }
        records.append(validate_record(raw))
    return records


def _dedupe_key(record: GsiRecord) -> str:
    return " ".join(tokenize(record.instruction)) + "\x1f" + " ".join(tokenize(record.output))


def dedupe(records: Sequence[GsiRecord]) -> list[GsiRecord]:
    """Drop records whose normalized (instruction, output) duplicates an
    earlier one; the earlier record wins."""
    seen: set[str] = set()
    kept: list[GsiRecord] = []
    for record in records:
        key = _dedupe_key(record)
        if key in seen:
            continue
        seen.add(key)
        kept.append(record)
    return kept


@dataclass
class BatchManifest:
    """Provenance sidecar for one generation batch."""

    prompt_hash: str
    chat_model: str
    temperature: float
    doc_ids: list[str] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""

    def to_json_dict(self) -> dict:
        return {
            "prompt_hash": self.prompt_hash,
            "chat_model": self.chat_model,
            "temperature": self.temperature,
            "doc_ids": self.doc_ids,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }


def generate_from_document(
    gateway: Gateway,
    doc_id: str,
    document_text: str,
    source: str = "",
    location_tag: str = "",
    deployment_type: str = "fine-tuning",
    recovery: bool = True,
    temperature: float = GENERATION_TEMPERATURE,
    clock: Callable[[], str] = utc_now_rfc3339,
    id_factory: Callable[[], str] = lambda: str(uuid.uuid4()),
) -> GenBatchResult:
    """Run the full generate-parse-enrich pipeline for one document."""
    system, user = render_sft_prompt(document_text)
    reply = gateway.chat(user_request(user, system=system, temperature=temperature)).text
    result = GenBatchResult(accepted=[], rejected=[], doc_id=doc_id, prompt_hash=template_hash())
    try:
        samples = parse_generation(reply, recovery=recovery)
    except SftError as exc:
        result.rejected.append((reply[:2000], str(exc)))
        return result
    result.accepted = enrich(
        samples,
        source=source or doc_id,
        location_tag=location_tag,
        deployment_type=deployment_type,
        clock=clock,
        id_factory=id_factory,
    )
    return result
