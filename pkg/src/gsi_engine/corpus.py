"""Retrieval-corpus manifest and passage segmentation.

Documents arrive as pre-extracted plain text (one file per manifest entry);
segmentation produces overlapping passages that fully cover the source so
any retrieved span can be traced back to exact character offsets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import EngineError

SENTENCE_TERMINATORS = ".?!:"


class CorpusError(EngineError):
    code = "corpus_error"


class ManifestParseError(CorpusError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message, line=line)
        self.line = line


class DuplicateDocId(CorpusError):
    def __init__(self, doc_id: str):
        super().__init__(f"duplicate doc_id: {doc_id}", doc_id=doc_id)
        self.doc_id = doc_id


class MissingLocalPath(CorpusError):
    def __init__(self, doc_id: str, path: str):
        super().__init__(f"local_path for {doc_id} does not exist: {path}", doc_id=doc_id, path=path)


class EmptyDocument(CorpusError):
    def __init__(self, doc_id: str = ""):
        super().__init__(f"document has no text: {doc_id}" if doc_id else "document has no text")


class BadConfig(CorpusError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    doc_id: str
    title: str
    url: str
    year: int | None = None
    local_path: str | None = None
    location_tag: str | None = None


@dataclass(frozen=True)
class Passage:
    """A contiguous document span; the unit of embedding and retrieval."""

    passage_id: str
    doc_id: str
    ordinal: int
    text: str
    char_start: int
    char_end: int


@dataclass(frozen=True)
class ChunkConfig:
    target_size: int = 800
    overlap: int = 200
    boundary_mode: str = "sentence-snap"

    def validate(self) -> "ChunkConfig":
        if self.target_size <= 0:
            raise BadConfig(f"target_size must be positive: {self.target_size}")
        if not 0 <= self.overlap < self.target_size:
            raise BadConfig(f"overlap must satisfy 0 <= overlap < target_size: {self.overlap}")
        if self.boundary_mode not in ("sentence-snap", "hard"):
            raise BadConfig(f"unknown boundary_mode: {self.boundary_mode}")
        return self


def load_manifest(path: str | Path, check_paths: bool = True) -> list[ManifestEntry]:
    """Load a jsonl manifest, rejecting duplicate doc_ids.

    When check_paths is set, any non-null local_path must exist on disk.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"line {lineno}: {exc.msg}", line=lineno) from exc
            if not isinstance(doc, dict) or "doc_id" not in doc or "title" not in doc:
                raise ManifestParseError(f"line {lineno}: expected object with doc_id and title", line=lineno)
            entry = ManifestEntry(
                doc_id=str(doc["doc_id"]),
                title=str(doc["title"]),
                url=str(doc.get("url", "")),
                year=int(doc["year"]) if doc.get("year") is not None else None,
                local_path=doc.get("local_path") or None,
                location_tag=doc.get("location_tag") or None,
            )
            if entry.doc_id in seen:
                raise DuplicateDocId(entry.doc_id)
            seen.add(entry.doc_id)
            if check_paths and entry.local_path and not Path(entry.local_path).exists():
                raise MissingLocalPath(entry.doc_id, entry.local_path)
            entries.append(entry)
    return entries


def seed_manifest_path() -> Path:
    """Path of the packaged corpus-source manifest."""
    return Path(str(resources.files("gsi_engine").joinpath("assets/corpus_manifest.jsonl")))


def _snap_boundary(text: str, tentative_end: int, min_end: int) -> int:
    """Move a cut point backward onto a sentence terminator or line break.

    Eligible positions p leave text[p-1] as a terminator followed by
    whitespace, or as a newline. Returns tentative_end when no eligible
    position exists in [min_end, tentative_end].
    """
    for p in range(tentative_end, min_end - 1, -1):
        prev = text[p - 1]
        if prev == "\n":
            return p
        if prev in SENTENCE_TERMINATORS and p < len(text) and text[p].isspace():
            return p
    return tentative_end


def segment_document(doc_id: str, text: str, config: ChunkConfig | None = None) -> list[Passage]:
    """Split text into overlapping passages covering the full source.

    Consecutive passages overlap by config.overlap characters (hard mode);
    sentence-snap moves each cut backward to the nearest sentence boundary
    within a 20% slack window, falling back to a hard cut.
    """
    config = (config or ChunkConfig()).validate()
    if not text:
        raise EmptyDocument(doc_id)

    slack = int(0.2 * config.target_size)
    passages: list[Passage] = []
    start = 0
    ordinal = 0
    while True:
        tentative_end = start + config.target_size
        if tentative_end >= len(text):
            end = len(text)
        elif config.boundary_mode == "sentence-snap":
            # The window floor must stay past start + overlap so the next
            # start always advances.
            min_end = max(start + config.overlap + 1, tentative_end - slack)
            end = _snap_boundary(text, tentative_end, min_end)
        else:
            end = tentative_end
        passages.append(
            Passage(
                passage_id=f"{doc_id}#{ordinal}",
                doc_id=doc_id,
                ordinal=ordinal,
                text=text[start:end],
                char_start=start,
                char_end=end,
            )
        )
        if end >= len(text):
            return passages
        start = end - config.overlap
        ordinal += 1


def save_passages(passages: Iterable[Passage], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for passage in passages:
            handle.write(
                json.dumps(
                    {
                        "passage_id": passage.passage_id,
                        "doc_id": passage.doc_id,
                        "ordinal": passage.ordinal,
                        "text": passage.text,
                        "char_start": passage.char_start,
                        "char_end": passage.char_end,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_passages(path: str | Path) -> list[Passage]:
    passages: list[Passage] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"line {lineno}: {exc.msg}", line=lineno) from exc
            passages.append(
                Passage(
                    passage_id=doc["passage_id"],
                    doc_id=doc["doc_id"],
                    ordinal=int(doc["ordinal"]),
                    text=doc["text"],
                    char_start=int(doc["char_start"]),
                    char_end=int(doc["char_end"]),
                )
            )
    return passages
