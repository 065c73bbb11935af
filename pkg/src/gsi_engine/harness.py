"""Evaluation harness: baseline matrix runs, the knowledge-injection
ablation, report rendering, and training-asset export.

Runs are resumable: every completed sample is checkpointed before the
next one starts, and a rerun with the same run directory picks up where
the previous process stopped, producing byte-identical reports.
"""

from __future__ import annotations

import csv
import io
import json
import re
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .agent import AgentConfig, Session, build_system_prompt, assemble_context, handle_turn
from .corpus import Passage
from .errors import EngineError
from .gateway import Gateway, sum_usage, user_request, with_chat_model
from .metrics import (
    AllSamplesUnparseable,
    LabelPair,
    MetricReport,
    MetricError,
    SampleScores,
    default_judge_rubric,
    embed_similarity,
    g_eval,
    human_mean,
    micro_f1,
    score_pair,
    tokenize,
)
from .records import GsiRecord, TaskFamily
from .retrieval import DEFAULT_TOP_K, VectorIndex, query

DEFAULT_SFT_CHAT_MODEL = "qwen3-vl-2b-instruct-gsi-sft"
FAILURE_RATE_LIMIT = 0.20

# Exact key order and spellings of the exported fine-tuning configuration.
TRAIN_CONFIG_TEXT = (
    "finetuning_type: lora\n"
    "bf16: true\n"
    "template: qwen3_vl\n"
    "lora_alpha: 16\n"
    "lora_dropout: 0\n"
    "lora_rank: 8\n"
    "lora_target: all\n"
)

MAIN_REPORT_ROWS = (
    ("BLEU-4", "bleu4"),
    ("ROUGE-1", "rouge1"),
    ("ROUGE-2", "rouge2"),
    ("ROUGE-L", "rougeL"),
    ("Sentence-BERT", "embed_sim"),
    ("G-Eval", "geval"),
)
OPTIONAL_REPORT_ROWS = (
    ("Micro-F1", "micro_f1"),
    ("Human", "human"),
)


class HarnessError(EngineError):
    code = "harness_error"


class RunAborted(HarnessError):
    def __init__(self, failures: int, total: int):
        super().__init__(
            f"aborted: {failures}/{total} samples failed "
            f"(limit {FAILURE_RATE_LIMIT:.0%})",
            failures=failures,
            total=total,
        )
        self.failures = failures
        self.total = total


class LayoutMismatch(HarnessError):
    pass


@dataclass(frozen=True)
class SystemConfig:
    """One evaluated system: which knowledge-injection paths are active."""

    name: str
    use_rag: bool = False
    use_sft_model: bool = False
    use_agent: bool = False
    sft_chat_model: str = DEFAULT_SFT_CHAT_MODEL
    top_k: int = DEFAULT_TOP_K
    context_char_budget: int = 4000

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "use_rag": self.use_rag,
            "use_sft_model": self.use_sft_model,
            "use_agent": self.use_agent,
            "sft_chat_model": self.sft_chat_model if self.use_sft_model else None,
            "top_k": self.top_k,
            "context_char_budget": self.context_char_budget,
        }


def baseline_configs() -> tuple[SystemConfig, SystemConfig, SystemConfig]:
    """The three evaluation baselines: direct prompting, retrieval on the
    base model, and the full system (fine-tuned model + retrieval + agent)."""
    return (
        SystemConfig(name="Base LLM"),
        SystemConfig(name="Base LLM + RAG", use_rag=True),
        SystemConfig(name="Fine-tuned LLM + RAG", use_rag=True, use_sft_model=True, use_agent=True),
    )


def ablation_configs() -> tuple[SystemConfig, SystemConfig, SystemConfig]:
    """The three knowledge-injection ablation arms."""
    return (
        SystemConfig(name="LLM + RAG", use_rag=True),
        SystemConfig(name="LLM + Fine-tuning", use_sft_model=True),
        SystemConfig(name="LLM + RAG + Fine-tuning", use_rag=True, use_sft_model=True),
    )


@dataclass(frozen=True)
class PredictionRow:
    sample_id: str
    prediction: str
    reference: str


@dataclass
class RunRecord:
    """Everything one evaluation run produced."""

    run_id: str
    config: SystemConfig
    dataset_id: str
    predictions: list[PredictionRow]
    report: MetricReport
    skipped: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    usage: dict[str, int] = field(default_factory=dict)


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


def _normalize_label(text: str) -> str:
    return " ".join(tokenize(text))


def _read_checkpoint(path: Path) -> dict[str, dict]:
    rows: dict[str, dict] = {}
    if not path.exists():
        return rows
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            row = json.loads(line)
            rows[row["sample_id"]] = row
    return rows


def _append_checkpoint(path: Path | None, row: dict) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(row, ensure_ascii=False) + "\n")


def _prompt_text(record: GsiRecord) -> str:
    return f"{record.instruction}\n\n{record.input}" if record.input else record.instruction


def _scores_to_dict(scores: SampleScores) -> dict:
    return {
        "bleu4": scores.bleu4,
        "rouge1": scores.rouge1,
        "rouge2": scores.rouge2,
        "rougeL": scores.rougeL,
        "embed_sim": scores.embed_sim,
        "geval": scores.geval,
        "human": scores.human,
    }


def _scores_from_dict(sample_id: str, doc: Mapping[str, object]) -> SampleScores:
    return SampleScores(sample_id=sample_id, **{k: doc.get(k) for k in (
        "bleu4", "rouge1", "rouge2", "rougeL", "embed_sim", "geval", "human",
    )})


class _SampleRunner:
    """Per-run context shared by all sample evaluations."""

    def __init__(
        self,
        config: SystemConfig,
        index: VectorIndex | None,
        gateway: Gateway,
        judge_gateway: Gateway,
        passages: Mapping[str, Passage] | None,
        human_scores: Mapping[str, float] | None,
        compute_geval: bool,
        compute_embed_sim: bool,
    ):
        self.config = config
        self.index = index
        self.gateway = gateway
        self.chat_gateway = (
            with_chat_model(gateway, config.sft_chat_model) if config.use_sft_model else gateway
        )
        self.judge_gateway = judge_gateway
        self.passages = passages
        self.human_scores = human_scores or {}
        self.compute_geval = compute_geval
        self.compute_embed_sim = compute_embed_sim
        self.system_prompt = build_system_prompt(None)
        self.rubric = default_judge_rubric()
        self.agent_config = AgentConfig(
            top_k=config.top_k, context_char_budget=config.context_char_budget
        )

    def predict(self, record: GsiRecord) -> str:
        prompt = _prompt_text(record)
        if self.config.use_agent:
            session = Session(session_id=f"eval-{record.id}")
            response = handle_turn(
                session, prompt, self.agent_config, self.index, self.chat_gateway, self.passages
            )
            return response.text
        if self.config.use_rag:
            query_vector = self.gateway.embed([prompt])[0]
            hits = query(self.index, query_vector, self.config.top_k)
            context, _ = assemble_context(hits, self.passages, self.config.context_char_budget)
            prompt = f"Reference passages:\n{context}\n\nQuestion: {prompt}"
        return self.chat_gateway.chat(user_request(prompt, system=self.system_prompt)).text

    def score(self, record: GsiRecord, prediction: str) -> SampleScores:
        scores = score_pair(record.id, prediction, record.output)
        embed_sim = None
        if self.compute_embed_sim and prediction:
            try:
                embed_sim = float(embed_similarity(prediction, record.output, self.gateway))
            except MetricError:
                embed_sim = None
        geval = None
        if self.compute_geval:
            try:
                result = g_eval(
                    [(_prompt_text(record), prediction, record.output)],
                    self.judge_gateway,
                    judge_prompt=self.rubric,
                )
                geval = result.scores[0]
            except AllSamplesUnparseable:
                geval = None
        return replace(
            scores,
            embed_sim=embed_sim,
            geval=geval,
            human=self.human_scores.get(record.id),
        )

    def evaluate(self, record: GsiRecord) -> dict:
        prediction = self.predict(record)
        scores = self.score(record, prediction)
        return {
            "sample_id": record.id,
            "skipped": False,
            "error": None,
            "prediction": prediction,
            "scores": _scores_to_dict(scores),
        }


def run_system(
    config: SystemConfig,
    dataset: Sequence[GsiRecord],
    index: VectorIndex | None,
    gateway: Gateway,
    passages: Mapping[str, Passage] | None = None,
    judge_gateway: Gateway | None = None,
    dataset_id: str = "dataset",
    run_id: str | None = None,
    runs_dir: str | Path | None = None,
    human_scores: Mapping[str, float] | None = None,
    compute_geval: bool = True,
    compute_embed_sim: bool = True,
    max_workers: int = 1,
) -> RunRecord:
    """Evaluate one system over a dataset with checkpointed resumption.

    Per-sample gateway failures are recorded and skipped; the run aborts
    once more than 20% of the dataset has failed. Skipped samples never
    enter the metric means.
    """
    if not dataset:
        raise HarnessError("dataset is empty")
    if (config.use_rag or config.use_agent) and index is None:
        raise HarnessError(f"{config.name!r} requires a vector index")
    if (config.use_rag or config.use_agent) and passages is None:
        raise HarnessError(f"{config.name!r} requires the passage map")
    started = time.monotonic()
    run_id = run_id or f"{_slug(dataset_id)}-{_slug(config.name)}"
    run_dir: Path | None = None
    checkpoint_path: Path | None = None
    if runs_dir is not None:
        run_dir = Path(runs_dir) / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = run_dir / "checkpoint"

    runner = _SampleRunner(
        config, index, gateway, judge_gateway or gateway, passages,
        human_scores, compute_geval, compute_embed_sim,
    )
    done = _read_checkpoint(checkpoint_path) if checkpoint_path else {}
    pending = [record for record in dataset if record.id not in done]
    total = len(dataset)
    failures = sum(1 for row in done.values() if row["skipped"])

    def note(row: dict) -> None:
        nonlocal failures
        done[row["sample_id"]] = row
        _append_checkpoint(checkpoint_path, row)
        if row["skipped"]:
            failures += 1

    def guarded(record: GsiRecord) -> dict:
        try:
            return runner.evaluate(record)
        except EngineError as exc:
            return {
                "sample_id": record.id,
                "skipped": True,
                "error": str(exc),
                "prediction": None,
                "scores": None,
            }

    if max_workers <= 1:
        for record in pending:
            note(guarded(record))
            if failures > FAILURE_RATE_LIMIT * total:
                raise RunAborted(failures, total)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {pool.submit(guarded, record) for record in pending}
            while futures:
                finished, futures = wait(futures, return_when=FIRST_COMPLETED)
                for future in finished:
                    note(future.result())
                if failures > FAILURE_RATE_LIMIT * total:
                    for future in futures:
                        future.cancel()
                    raise RunAborted(failures, total)

    predictions: list[PredictionRow] = []
    rows: list[SampleScores] = []
    failure_list: list[tuple[str, str]] = []
    classification_pairs: list[LabelPair] = []
    for record in dataset:
        row = done[record.id]
        if row["skipped"]:
            failure_list.append((record.id, row["error"] or ""))
            continue
        predictions.append(PredictionRow(record.id, row["prediction"], record.output))
        rows.append(_scores_from_dict(record.id, row["scores"]))
        if record.task_type is TaskFamily.CLASSIFICATION:
            classification_pairs.append(
                LabelPair(_normalize_label(row["prediction"]) or "(empty)", _normalize_label(record.output))
            )

    report = MetricReport.from_rows(rows)
    if classification_pairs:
        report.aggregates["micro_f1"] = micro_f1(classification_pairs)
        report.counts["micro_f1"] = len(classification_pairs)

    record_out = RunRecord(
        run_id=run_id,
        config=config,
        dataset_id=dataset_id,
        predictions=predictions,
        report=report,
        skipped=len(failure_list),
        failures=failure_list,
        wall_clock_seconds=time.monotonic() - started,
        usage={},
    )
    if run_dir is not None:
        _write_run_artifacts(run_dir, record_out)
    return record_out


def _write_run_artifacts(run_dir: Path, record: RunRecord) -> None:
    snapshot = {
        "run_id": record.run_id,
        "dataset_id": record.dataset_id,
        "config": record.config.to_json_dict(),
    }
    (run_dir / "config.snapshot").write_text(
        json.dumps(snapshot, indent=2, ensure_ascii=False) + "\n", encoding="utf-8", newline="\n"
    )
    with open(run_dir / "predictions.jsonl", "w", encoding="utf-8", newline="\n") as handle:
        for row in record.predictions:
            handle.write(
                json.dumps(
                    {"sample_id": row.sample_id, "prediction": row.prediction, "reference": row.reference},
                    ensure_ascii=False,
                )
                + "\n"
            )
    markdown, csv_text = emit_report([record], layout="main")
    (run_dir / "report.md").write_text(markdown, encoding="utf-8", newline="\n")
    (run_dir / "report.csv").write_text(csv_text, encoding="utf-8", newline="\n")


def run_ablation(
    dataset: Sequence[GsiRecord],
    index: VectorIndex,
    gateway: Gateway,
    passages: Mapping[str, Passage],
    judge_gateway: Gateway | None = None,
    dataset_id: str = "gsi",
    runs_dir: str | Path | None = None,
    **run_kwargs,
) -> tuple[list[RunRecord], str, str]:
    """Run the three-arm knowledge-injection ablation and render its
    comparison table. Returns (records, markdown, csv)."""
    records = [
        run_system(
            config,
            dataset,
            index,
            gateway,
            passages=passages,
            judge_gateway=judge_gateway,
            dataset_id=dataset_id,
            runs_dir=runs_dir,
            **run_kwargs,
        )
        for config in ablation_configs()
    ]
    markdown, csv_text = emit_report(records, layout="ablation")
    return records, markdown, csv_text


def _format_cell(column: str, value: float | None) -> str:
    if value is None:
        return "-"
    return f"{value:.2f}" if column == "geval" else f"{value:.3f}"


def _main_matrix(records: Sequence[RunRecord]) -> tuple[list[str], list[tuple[str, list[str]]]]:
    datasets: list[str] = []
    for record in records:
        if record.dataset_id not in datasets:
            datasets.append(record.dataset_id)
    ordered = [r for d in datasets for r in records if r.dataset_id == d]
    headers = [f"{r.dataset_id} / {r.config.name}" for r in ordered]
    row_specs = list(MAIN_REPORT_ROWS) + [
        (label, column)
        for label, column in OPTIONAL_REPORT_ROWS
        if any(column in r.report.aggregates for r in ordered)
    ]
    body: list[tuple[str, list[str]]] = []
    for label, column in row_specs:
        cells = [_format_cell(column, r.report.aggregates.get(column)) for r in ordered]
        body.append((label, cells))
    return headers, body


def emit_report(records: Sequence[RunRecord], layout: str = "main") -> tuple[str, str]:
    """Render RunRecords as a markdown table plus a CSV with the same
    value matrix. Pure function of its inputs."""
    if not records:
        raise LayoutMismatch("no run records")
    if layout == "main":
        headers, body = _main_matrix(records)
        lines = ["| Metric | " + " | ".join(headers) + " |"]
        lines.append("|" + " --- |" * (len(headers) + 1))
        for label, cells in body:
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
        markdown = "\n".join(lines) + "\n"
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["metric", *headers])
        for label, cells in body:
            writer.writerow([label] + [c if c != "-" else "" for c in cells])
        return markdown, buffer.getvalue()
    if layout == "ablation":
        lines = ["| Method | G-Eval Score |", "| --- | --- |"]
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["method", "geval"])
        for record in records:
            cell = _format_cell("geval", record.report.aggregates.get("geval"))
            lines.append(f"| {record.config.name} | {cell} |")
            writer.writerow([record.config.name, cell if cell != "-" else ""])
        return "\n".join(lines) + "\n", buffer.getvalue()
    raise LayoutMismatch(f"unknown layout: {layout!r}")


def parse_report_matrix(text: str, kind: str) -> list[list[str | None]]:
    """Parse an emitted report back into its value matrix (labels + cells);
    used to confirm the markdown and CSV views agree."""
    matrix: list[list[str | None]] = []
    if kind == "markdown":
        lines = [line for line in text.splitlines() if line.strip()]
        for line in lines[2:]:
            cells = [c.strip() for c in line.strip().strip("|").split("|")]
            matrix.append([None if c in ("-", "") else c for c in cells])
        return matrix
    if kind == "csv":
        for row in list(csv.reader(io.StringIO(text)))[1:]:
            matrix.append([None if c == "" else c for c in row])
        return matrix
    raise LayoutMismatch(f"unknown report kind: {kind!r}")


def export_training_assets(
    train: Sequence[GsiRecord],
    val: Sequence[GsiRecord],
    out_dir: str | Path,
) -> list[Path]:
    """Write train/val jsonl (metadata stripped to instruction/input/output)
    and the fine-tuning configuration file, byte-stable across platforms."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, split in (("train.jsonl", train), ("val.jsonl", val)):
        path = out / name
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for record in split:
                handle.write(
                    json.dumps(
                        {
                            "instruction": record.instruction,
                            "input": record.input,
                            "output": record.output,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
        paths.append(path)
    config_path = out / "train_config.yaml"
    with open(config_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(TRAIN_CONFIG_TEXT)
    paths.append(config_path)
    return paths


def load_human_scores(path: str | Path, scale: str = "1-5") -> dict[str, float]:
    """Read expert scores (jsonl: sample_id, score) normalized to [0, 1]."""
    scores: dict[str, float] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                sample_id = row["sample_id"]
                value = float(row["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise HarnessError(f"bad human-score line {lineno}: {exc}") from exc
            scores[sample_id] = human_mean([value], scale=scale)
    return scores
