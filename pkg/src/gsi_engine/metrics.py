"""Evaluation metric suite: BLEU-4, ROUGE-1/2/L, Micro-F1, embedding
cosine similarity, judge-based scoring, and human score aggregation.

All metric values lie in [0, 1]. Lexical metrics are pure functions of the
canonical tokenizer's output.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

from .errors import EngineError
from .gateway import Gateway, user_request
from .retrieval import cosine

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

METRIC_COLUMNS = ("bleu4", "rouge1", "rouge2", "rougeL", "embed_sim", "geval", "human")


class MetricError(EngineError):
    code = "metric_error"


class UnknownLabel(MetricError):
    def __init__(self, label: str):
        super().__init__(f"label not in declared class set: {label!r}", label=label)


class EmptyInput(MetricError):
    pass


class OutOfScale(MetricError):
    def __init__(self, value: float):
        super().__init__(f"score outside the declared scale: {value}", value=value)


class AllSamplesUnparseable(MetricError):
    def __init__(self):
        super().__init__("no judge reply could be parsed as a 1-5 score")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on Unicode whitespace, detach punctuation as tokens."""
    return _TOKEN_RE.findall(text.lower())


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Sequence[str], reference: Sequence[str], smoothing_epsilon: float = 0.0) -> float:
    """Sentence BLEU-4: brevity penalty times the geometric mean of clipped
    1-4-gram precisions against a single reference.

    Without smoothing (the default) the score is 0 whenever any precision
    is 0, which includes every candidate shorter than 4 tokens.
    """
    c = len(candidate)
    r = len(reference)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand_counts = _ngram_counts(candidate, n)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        ref_counts = _ngram_counts(reference, n)
        clipped = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        p_n = clipped / total
        if p_n == 0.0:
            if smoothing_epsilon <= 0.0:
                return 0.0
            p_n = smoothing_epsilon
        log_sum += math.log(p_n)
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum / 4.0)


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> float:
    """Recall-oriented n-gram overlap: clipped matches over reference n-grams."""
    if n not in (1, 2):
        raise MetricError(f"n must be 1 or 2, got {n}")
    ref_counts = _ngram_counts(reference, n)
    denominator = sum(ref_counts.values())
    if denominator == 0:
        return 0.0
    cand_counts = _ngram_counts(candidate, n)
    matched = sum(min(count, cand_counts[gram]) for gram, count in ref_counts.items())
    return matched / denominator


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """LCS length over reference length (recall orientation)."""
    if not reference:
        return 0.0
    return _lcs_length(candidate, reference) / len(reference)


def rouge_l_fmeasure(candidate: Sequence[str], reference: Sequence[str], beta: float = 1.2) -> float:
    """F-measure ROUGE-L variant, available behind this explicit call only."""
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    recall = lcs / len(reference)
    precision = lcs / len(candidate)
    beta2 = beta * beta
    return (1 + beta2) * recall * precision / (recall + beta2 * precision)


@dataclass(frozen=True)
class LabelPair:
    predicted: str
    gold: str

    def __post_init__(self):
        if not self.predicted or not self.gold:
            raise MetricError("labels must be non-empty")


def micro_f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denominator = 2 * tp + fp + fn
    if denominator == 0:
        return 0.0
    return 2 * tp / denominator


def micro_f1(pairs: Sequence[LabelPair], classes: set[str] | None = None) -> float:
    """F1 from TP/FP/FN summed over all classes of the confusion counts."""
    if not pairs:
        raise EmptyInput("no label pairs")
    if classes is None:
        classes = {p.predicted for p in pairs} | {p.gold for p in pairs}
    tp = fp = fn = 0
    for pair in pairs:
        if pair.predicted not in classes:
            raise UnknownLabel(pair.predicted)
        if pair.gold not in classes:
            raise UnknownLabel(pair.gold)
        if pair.predicted == pair.gold:
            tp += 1
        else:
            fp += 1
            fn += 1
    return micro_f1_from_counts(tp, fp, fn)


def embed_similarity(candidate: str, reference: str, gateway: Gateway, clamp: bool = True) -> float:
    """Cosine similarity of the two texts' embeddings.

    Reports clamp negatives to 0 so every metric column shares the [0, 1]
    scale; pass clamp=False for the raw cosine in [-1, 1].
    """
    if not candidate or not reference:
        raise EmptyInput("candidate and reference must be non-empty")
    vec_c, vec_r = gateway.embed([candidate, reference])
    value = cosine(vec_c, vec_r)
    return max(0.0, value) if clamp else value


def default_judge_rubric() -> str:
    return resources.files("gsi_engine").joinpath("templates/judge_rubric.txt").read_text(encoding="utf-8")


_SCORE_RE = re.compile(r"\b([1-5])\b")


def parse_judge_score(reply: str) -> int | None:
    """First standalone integer 1-5 in the reply, else None."""
    match = _SCORE_RE.search(reply)
    return int(match.group(1)) if match else None


@dataclass
class GEvalResult:
    scores: list[float | None]
    mean: float
    unparsed: int


def g_eval(
    samples: Sequence[tuple[str, str, str]],
    gateway: Gateway,
    judge_prompt: str | None = None,
) -> GEvalResult:
    """Judge each (question, answer, reference) with a 1-5 rubric and
    average the normalized scores (s - 1) / 4.

    An unparseable reply is retried once with a stricter instruction, then
    recorded as missing and excluded from the mean.
    """
    rubric = judge_prompt if judge_prompt is not None else default_judge_rubric()
    scores: list[float | None] = []
    unparsed = 0
    for question, answer, reference in samples:
        prompt = rubric.format(question=question, answer=answer, reference=reference)
        reply = gateway.chat(user_request(prompt)).text
        raw = parse_judge_score(reply)
        if raw is None:
            retry = gateway.chat(
                user_request(prompt + "\n\nReply with ONLY one integer between 1 and 5.")
            ).text
            raw = parse_judge_score(retry)
        if raw is None:
            unparsed += 1
            scores.append(None)
        else:
            scores.append((raw - 1) / 4.0)
    present = [s for s in scores if s is not None]
    if not present:
        raise AllSamplesUnparseable()
    return GEvalResult(scores=scores, mean=sum(present) / len(present), unparsed=unparsed)


def human_mean(scores: Sequence[float], scale: str = "unit") -> float:
    """Mean expert score, normalized to [0, 1].

    scale "unit" expects values already in [0, 1]; scale "1-5" maps s to
    (s - 1) / 4.
    """
    if not scores:
        raise EmptyInput("no scores")
    if scale == "unit":
        normalized = list(scores)
        low, high = 0.0, 1.0
    elif scale == "1-5":
        low, high = 1.0, 5.0
        normalized = [(s - 1.0) / 4.0 for s in scores]
    else:
        raise MetricError(f"unknown scale: {scale}")
    for raw in scores:
        if not low <= raw <= high:
            raise OutOfScale(raw)
    return sum(normalized) / len(normalized)


@dataclass(frozen=True)
class SampleScores:
    """Per-sample metric row; absent metrics are None."""

    sample_id: str
    bleu4: float | None = None
    rouge1: float | None = None
    rouge2: float | None = None
    rougeL: float | None = None
    embed_sim: float | None = None
    geval: float | None = None
    human: float | None = None

    def value(self, column: str) -> float | None:
        return getattr(self, column)


@dataclass
class MetricReport:
    """Per-sample rows plus aggregate means and presence counts."""

    rows: list[SampleScores] = field(default_factory=list)
    aggregates: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: Sequence[SampleScores]) -> "MetricReport":
        aggregates: dict[str, float] = {}
        counts: dict[str, int] = {}
        for column in METRIC_COLUMNS:
            values = [row.value(column) for row in rows]
            present = [v for v in values if v is not None]
            counts[column] = len(present)
            if present:
                aggregates[column] = sum(present) / len(present)
        return cls(rows=list(rows), aggregates=aggregates, counts=counts)

    def to_json_dict(self) -> dict:
        return {
            "aggregates": self.aggregates,
            "counts": self.counts,
            "rows": [
                {"sample_id": row.sample_id, **{c: row.value(c) for c in METRIC_COLUMNS}}
                for row in self.rows
            ],
        }


def score_pair(sample_id: str, prediction: str, reference: str) -> SampleScores:
    """All lexical metrics for one prediction/reference pair."""
    cand = tokenize(prediction)
    ref = tokenize(reference)
    return SampleScores(
        sample_id=sample_id,
        bleu4=bleu4(cand, ref),
        rouge1=rouge_n(cand, ref, 1),
        rouge2=rouge_n(cand, ref, 2),
        rougeL=rouge_l(cand, ref),
    )
