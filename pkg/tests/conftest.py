"""Shared fixtures: deterministic records, a small GSI passage corpus, and
stub-backed indexes."""

from __future__ import annotations

import itertools
import random
from typing import Sequence

import pytest

from gsi_engine.corpus import Passage
from gsi_engine.gateway import StubGateway
from gsi_engine.records import GsiRecord, TaskFamily, validate_record
from gsi_engine.retrieval import embed_and_index

FIXED_TIMESTAMP = "2025-06-01T00:00:00Z"

# Small vocabulary so random token sequences share n-grams often enough to
# exercise the interesting metric branches.
METRIC_VOCAB = ("the", "basin", "drains", "slowly", "inspect", "inlet", "for", "debris")


def fixed_uuid(i: int) -> str:
    """Deterministic id that still satisfies the UUIDv4 shape."""
    return f"{i:08x}-0000-4000-8000-000000000000"


def make_raw(i: int = 0, **overrides) -> dict:
    raw = {
        "_id": fixed_uuid(i),
        "_source": "fixture.pdf",
        "_source_location": "Philadelphia, PA",
        "_task_type": TaskFamily.QUESTION_ANSWERING.value,
        "_deployment_type": "fine-tuning",
        "_created_at": FIXED_TIMESTAMP,
        "instruction": f"What is inspected in facility {i}?",
        "input": "",
        "output": f"The inlet of facility {i} is inspected for sediment.",
    }
    raw.update(overrides)
    return raw


def make_record(i: int = 0, **overrides) -> GsiRecord:
    return validate_record(make_raw(i, **overrides))


def make_dataset(n: int, **overrides) -> list[GsiRecord]:
    return [make_record(i, **overrides) for i in range(n)]


def random_token_pairs(count: int, seed: int, max_len: int = 40) -> list[tuple[list[str], list[str]]]:
    rng = random.Random(seed)
    pairs = []
    for _ in range(count):
        cand = [rng.choice(METRIC_VOCAB) for _ in range(rng.randint(1, max_len))]
        ref = [rng.choice(METRIC_VOCAB) for _ in range(rng.randint(1, max_len))]
        pairs.append((cand, ref))
    return pairs


PASSAGE_TEXTS = {
    "manual#0": (
        "Permeable pavement allows stormwater to infiltrate through the surface "
        "into a stone reservoir below. Inspect the surface quarterly for clogging "
        "and vacuum-sweep it twice per year."
    ),
    "manual#1": (
        "Rain gardens are shallow vegetated basins that collect roof and street "
        "runoff. Remove accumulated sediment at the inlet and replace dead plants "
        "each spring."
    ),
    "guide#0": (
        "Bioretention basins use engineered soil media to filter runoff before it "
        "reaches the sewer. Check the overflow structure after major storms and "
        "clear any debris."
    ),
}


@pytest.fixture
def stub() -> StubGateway:
    return StubGateway(seed=7)


@pytest.fixture
def passages() -> list[Passage]:
    out = []
    for ordinal, (pid, text) in enumerate(sorted(PASSAGE_TEXTS.items())):
        doc_id = pid.split("#")[0]
        out.append(
            Passage(
                passage_id=pid,
                doc_id=doc_id,
                ordinal=ordinal,
                text=text,
                char_start=0,
                char_end=len(text),
            )
        )
    return out


@pytest.fixture
def passage_map(passages) -> dict[str, Passage]:
    return {p.passage_id: p for p in passages}


@pytest.fixture
def small_index(passages, stub):
    return embed_and_index([p.passage_id for p in passages], [p.text for p in passages], stub)


@pytest.fixture
def scripted_gateway_factory():
    def factory(replies: Sequence[str], seed: int = 7) -> "ScriptedChatGateway":
        return ScriptedChatGateway(replies, seed=seed)

    return factory


class ScriptedChatGateway:
    """Gateway whose chat replies come from a fixed script; embeds are
    delegated to a seeded stub so indexes still work."""

    def __init__(self, replies: Sequence[str], seed: int = 7):
        self._replies = itertools.chain(iter(replies), itertools.repeat(replies[-1]))
        self._stub = StubGateway(seed=seed)
        self.chat_model_name = "scripted"
        self.embed_model_name = self._stub.embed_model_name
        self.chat_requests = []

    def chat(self, request):
        from gsi_engine.gateway import ChatResult

        self.chat_requests.append(request)
        return ChatResult(text=next(self._replies), usage={})

    def embed(self, texts):
        return self._stub.embed(texts)
