"""Instruction-record store: schema validation, persistence, splits, stats.

Records use the underscore-prefixed on-disk keys (`_id`, `_source`, ...)
so exported files are directly usable as SFT inputs by external trainers.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .errors import EngineError


class RecordError(EngineError):
    """Base class for record validation/storage errors."""

    code = "record_error"


class MissingField(RecordError):
    def __init__(self, name: str):
        super().__init__(f"missing required field: {name}", field=name)
        self.field = name


class UnknownField(RecordError):
    def __init__(self, name: str):
        super().__init__(f"unknown field in strict mode: {name}", field=name)
        self.field = name


class BadEnum(RecordError):
    def __init__(self, field_name: str, value: str):
        super().__init__(f"bad value for {field_name}: {value!r}", field=field_name, value=value)
        self.field = field_name
        self.value = value


class BadUuid(RecordError):
    def __init__(self, value: str):
        super().__init__(f"not a canonical UUIDv4: {value!r}", value=value)
        self.value = value


class BadTimestamp(RecordError):
    def __init__(self, value: str):
        super().__init__(f"not an RFC3339 UTC timestamp: {value!r}", value=value)
        self.value = value


class EmptyRequiredText(RecordError):
    def __init__(self, field_name: str):
        super().__init__(f"field must be non-empty: {field_name}", field=field_name)
        self.field = field_name


class BadFieldType(RecordError):
    def __init__(self, field_name: str, expected: str):
        super().__init__(f"field {field_name} must be {expected}", field=field_name)
        self.field = field_name


class ParseError(RecordError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message, line=line)
        self.line = line


class DuplicateId(RecordError):
    def __init__(self, record_id: str):
        super().__init__(f"duplicate record id: {record_id}", id=record_id)
        self.id = record_id


class InvalidRecord(RecordError):
    """Wraps a validation error with the 0-based index of the offending record."""

    def __init__(self, index: int, cause: RecordError):
        super().__init__(f"record {index}: {cause}", index=index)
        self.index = index
        self.cause = cause


class EmptyDataset(RecordError):
    def __init__(self):
        super().__init__("dataset is empty")


class BadRatios(RecordError):
    def __init__(self, ratios):
        super().__init__(f"split ratios must be positive and sum to 1: {ratios}", ratios=list(ratios))


class TaskFamily(enum.Enum):
    """The nine task families a record may belong to."""

    QUESTION_ANSWERING = "Question Answering"
    VERIFICATION_JUDGMENT = "Verification / Judgment"
    GENERATION_COMPOSITION = "Generation / Composition"
    INFORMATION_EXTRACTION = "Information Extraction"
    CLASSIFICATION = "Classification"
    REASONING_MATH_LOGIC = "Reasoning / Math / Logic"
    DIALOGUE_INTERACTION = "Dialogue Interaction"
    REWRITING_TRANSFORMATION = "Rewriting / Transformation"
    CODE_PROGRAM_EXECUTION = "Code / Program Execution"

    @classmethod
    def parse(cls, value: str) -> "TaskFamily":
        for member in cls:
            if member.value == value:
                return member
        raise BadEnum("_task_type", value)


DEPLOYMENT_TYPES = ("fine-tuning", "rag")

# Canonical hyphenated UUIDv4: version nibble 4, variant in [89ab].
_UUID4_RE = re.compile(
    r"^[0-9a-f]{8}-[0-9a-f]{4}-4[0-9a-f]{3}-[89ab][0-9a-f]{3}-[0-9a-f]{12}$",
    re.IGNORECASE,
)

# RFC3339 timestamp pinned to UTC (trailing Z or +00:00).
_RFC3339_UTC_RE = re.compile(
    r"^\d{4}-\d{2}-\d{2}[Tt]\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:[Zz]|\+00:00)$"
)

REQUIRED_KEYS = ("_id", "_task_type", "_deployment_type", "_created_at", "instruction", "output")
OPTIONAL_KEYS = ("_source", "_source_location", "input")
ALL_KEYS = (
    "_id",
    "_source",
    "_source_location",
    "_task_type",
    "_deployment_type",
    "_created_at",
    "instruction",
    "input",
    "output",
)


@dataclass(frozen=True)
class GsiRecord:
    """One instruction-tuning sample with its metadata envelope."""

    id: str
    source: str
    source_location: str
    task_type: TaskFamily
    deployment_type: str
    created_at: str
    instruction: str
    input: str
    output: str
    extras: Mapping[str, object] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        doc = {
            "_id": self.id,
            "_source": self.source,
            "_source_location": self.source_location,
            "_task_type": self.task_type.value,
            "_deployment_type": self.deployment_type,
            "_created_at": self.created_at,
            "instruction": self.instruction,
            "input": self.input,
            "output": self.output,
        }
        doc.update(self.extras)
        return doc


def validate_uuid4(value: str) -> str:
    if not isinstance(value, str) or not _UUID4_RE.match(value):
        raise BadUuid(str(value))
    return value


def validate_timestamp(value: str) -> str:
    if not isinstance(value, str) or not _RFC3339_UTC_RE.match(value):
        raise BadTimestamp(str(value))
    return value


def validate_record(raw: Mapping[str, object], lenient: bool = False) -> GsiRecord:
    """Validate a parsed key-value document against the record schema.

    Strict mode (default) rejects unknown keys; lenient mode preserves them
    in the record's extras map. Raises a RecordError subclass on the first
    violated invariant.
    """
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise MissingField(key)

    extras: dict[str, object] = {}
    for key in raw:
        if key not in ALL_KEYS:
            if not lenient:
                raise UnknownField(key)
            extras[key] = raw[key]

    def _text(key: str, required: bool) -> str:
        value = raw.get(key, "")
        if not isinstance(value, str):
            raise BadFieldType(key, "a string")
        if required and not value.strip():
            raise EmptyRequiredText(key)
        return value

    record_id = validate_uuid4(str(raw["_id"]))
    task_type = raw["_task_type"]
    if not isinstance(task_type, str):
        raise BadEnum("_task_type", str(task_type))
    family = TaskFamily.parse(task_type)
    deployment = raw["_deployment_type"]
    if deployment not in DEPLOYMENT_TYPES:
        raise BadEnum("_deployment_type", str(deployment))
    created_at = validate_timestamp(str(raw["_created_at"]))

    return GsiRecord(
        id=record_id,
        source=_text("_source", required=False),
        source_location=_text("_source_location", required=False),
        task_type=family,
        deployment_type=deployment,
        created_at=created_at,
        instruction=_text("instruction", required=True),
        input=_text("input", required=False),
        output=_text("output", required=True),
        extras=extras,
    )


def _infer_format(path: Path, explicit: str | None) -> str:
    if explicit is not None:
        if explicit not in ("jsonl", "json-array"):
            raise ParseError(f"unknown dataset format: {explicit}")
        return explicit
    return "json-array" if path.suffix == ".json" else "jsonl"


def load_dataset(path: str | Path, format: str | None = None, lenient: bool = False) -> list[GsiRecord]:
    """Load and validate a dataset file, preserving record order.

    jsonl parse failures carry the 1-based line number; per-record
    validation failures are wrapped in InvalidRecord with the record index.
    Duplicate ids are rejected.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    raw_docs: list[Mapping[str, object]] = []
    if fmt == "jsonl":
        with open(path, encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"line {lineno}: {exc.msg}", line=lineno) from exc
                if not isinstance(doc, dict):
                    raise ParseError(f"line {lineno}: expected an object", line=lineno)
                raw_docs.append(doc)
    else:
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"offset {exc.pos}: {exc.msg}") from exc
        if not isinstance(data, list):
            raise ParseError("expected a top-level JSON array")
        for doc in data:
            if not isinstance(doc, dict):
                raise ParseError("array elements must be objects")
            raw_docs.append(doc)

    records: list[GsiRecord] = []
    seen: set[str] = set()
    for index, doc in enumerate(raw_docs):
        try:
            record = validate_record(doc, lenient=lenient)
        except RecordError as exc:
            raise InvalidRecord(index, exc) from exc
        if record.id in seen:
            raise DuplicateId(record.id)
        seen.add(record.id)
        records.append(record)
    return records


def write_dataset(records: Iterable[GsiRecord], path: str | Path, format: str | None = None) -> None:
    """Write records in the canonical on-disk form (jsonl by default)."""
    path = Path(path)
    fmt = _infer_format(path, format)
    docs = [record.to_json_dict() for record in records]
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        if fmt == "jsonl":
            for doc in docs:
                handle.write(json.dumps(doc, ensure_ascii=False) + "\n")
        else:
            json.dump(docs, handle, ensure_ascii=False, indent=2)
            handle.write("\n")


@dataclass(frozen=True)
class BucketStat:
    count: int
    percent: float


@dataclass(frozen=True)
class DatasetStats:
    """Count/percentage breakdowns over location, deployment, and task type."""

    total: int
    by_location: dict[str, BucketStat]
    by_deployment: dict[str, BucketStat]
    by_task: dict[str, BucketStat]

    def to_json_dict(self) -> dict:
        def _dump(buckets: dict[str, BucketStat]) -> dict:
            return {k: {"count": v.count, "percent": v.percent} for k, v in buckets.items()}

        return {
            "total": self.total,
            "by_location": _dump(self.by_location),
            "by_deployment": _dump(self.by_deployment),
            "by_task": _dump(self.by_task),
        }


def _bucketize(values: Iterable[str], total: int) -> dict[str, BucketStat]:
    counts: dict[str, int] = {}
    for value in values:
        counts[value] = counts.get(value, 0) + 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {key: BucketStat(count, round(100.0 * count / total, 1)) for key, count in ordered}


def compute_stats(records: list[GsiRecord]) -> DatasetStats:
    """Tally exact counts and one-decimal percentages per dimension.

    Empty source_location is bucketed under "None". Denominator is always
    the record count.
    """
    if not records:
        raise EmptyDataset()
    total = len(records)
    return DatasetStats(
        total=total,
        by_location=_bucketize((r.source_location or "None" for r in records), total),
        by_deployment=_bucketize((r.deployment_type for r in records), total),
        by_task=_bucketize((r.task_type.value for r in records), total),
    )


def stats_to_csv(stats: DatasetStats) -> str:
    """Render the three breakdowns as CSV sections (`bucket,count,percent`)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    for name, buckets in (
        ("by_location", stats.by_location),
        ("by_deployment", stats.by_deployment),
        ("by_task", stats.by_task),
    ):
        out.write(f"# {name} (total={stats.total})\n")
        writer.writerow(["bucket", "count", "percent"])
        for key, stat in buckets.items():
            writer.writerow([key, stat.count, f"{stat.percent:.1f}"])
    return out.getvalue()


def split_dataset(
    records: list[GsiRecord],
    ratios: tuple[float, float, float] = (0.9, 0.05, 0.05),
    seed: int = 0,
) -> tuple[list[GsiRecord], list[GsiRecord], list[GsiRecord]]:
    """Deterministic train/val/test partition.

    Val and test sizes are round(ratio * N) (half-up); the remainder goes
    to train. The three outputs are disjoint and their union equals the
    input as a multiset.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(ratios)
    n = len(records)
    n_val = int(math.floor(ratios[1] * n + 0.5))
    n_test = int(math.floor(ratios[2] * n + 0.5))
    n_train = n - n_val - n_test
    if n_train < 0:
        raise BadRatios(ratios)
    shuffled = list(records)
    random.Random(seed).shuffle(shuffled)
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


def filter_records(
    records: list[GsiRecord],
    deployment_type: str | None = None,
    task_type: TaskFamily | None = None,
    source_location: str | None = None,
    predicate: Callable[[GsiRecord], bool] | None = None,
) -> list[GsiRecord]:
    """Stable-order subset matching all given criteria."""

    def _keep(record: GsiRecord) -> bool:
        if deployment_type is not None and record.deployment_type != deployment_type:
            return False
        if task_type is not None and record.task_type is not task_type:
            return False
        if source_location is not None and record.source_location != source_location:
            return False
        if predicate is not None and not predicate(record):
            return False
        return True

    return [record for record in records if _keep(record)]
