"""Command-line front end. Each verb is a thin wrapper over one module
operation; exit codes are 0 (success), 1 (operational failure), 2 (usage).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import httpx

from . import __version__
from .agent import AgentConfig, SessionStore, handle_turn
from .config import EngineConfig, build_gateway
from .corpus import ChunkConfig, load_manifest, load_passages, save_passages, segment_document
from .errors import EngineError
from .harness import (
    baseline_configs,
    emit_report,
    export_training_assets,
    run_ablation,
    run_system,
)
from .records import compute_stats, load_dataset, split_dataset, stats_to_csv, write_dataset
from .retrieval import embed_and_index, load_index, save_index
from .sft import generate_from_document

SYSTEM_CHOICES = {
    "base": 0,
    "rag": 1,
    "full": 2,
}


def common_options(fn):
    fn = click.option(
        "--config", "config_path", type=click.Path(path_type=Path), default=None,
        help="Engine config JSON file.",
    )(fn)
    fn = click.option(
        "--stub-gateway", "stub_seed", type=int, default=None, metavar="SEED",
        help="Use the seeded offline stub gateway instead of the HTTP one.",
    )(fn)
    return fn


def engine_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EngineError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _load_config(config_path: Path | None) -> EngineConfig:
    return EngineConfig.load(config_path) if config_path else EngineConfig()


@click.group()
@click.version_option(version=__version__, prog_name="gsi")
def cli() -> None:
    """Document-grounded QA engine for green stormwater infrastructure."""


@cli.command()
@common_options
@click.option("--input", "input_path", type=click.Path(path_type=Path), required=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None,
              help="Write the validated dataset back out as jsonl.")
@click.option("--lenient", is_flag=True, help="Tolerate unknown extra fields.")
@engine_errors
def ingest(config_path, stub_seed, input_path, out_path, lenient):
    """Validate an instruction dataset file."""
    records = load_dataset(input_path, lenient=lenient)
    if out_path:
        write_dataset(records, out_path)
    click.echo(f"{len(records)} records valid")


@cli.command()
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(path_type=Path), default=None)
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
@click.option("--passages-out", type=click.Path(path_type=Path), default=None)
@click.option("--target-size", type=int, default=800, show_default=True)
@click.option("--overlap", type=int, default=200, show_default=True)
@engine_errors
def index(config_path, stub_seed, manifest_path, out_path, passages_out, target_size, overlap):
    """Segment manifest documents and build the vector index."""
    config = _load_config(config_path)
    manifest_path = manifest_path or config.manifest_path
    out_path = out_path or config.index_path
    passages_out = passages_out or config.passages_path
    gateway = build_gateway(config, stub_seed=stub_seed)
    chunking = ChunkConfig(target_size=target_size, overlap=overlap)

    entries = load_manifest(manifest_path)
    passages = []
    skipped = 0
    for entry in entries:
        if not entry.local_path:
            skipped += 1
            continue
        text = Path(entry.local_path).read_text(encoding="utf-8")
        passages.extend(segment_document(entry.doc_id, text, chunking))
    if not passages:
        raise EngineError("manifest has no local documents to segment")
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(passages_out).parent.mkdir(parents=True, exist_ok=True)
    save_passages(passages, passages_out)
    built = embed_and_index([p.passage_id for p in passages], [p.text for p in passages], gateway)
    save_index(built, out_path)
    if skipped:
        click.echo(f"skipped {skipped} manifest entries without local_path", err=True)
    click.echo(f"indexed {len(built)} passages from {len(entries) - skipped} documents")


@cli.command("gen-sft")
@common_options
@click.option("--doc", "doc_paths", type=click.Path(path_type=Path), multiple=True, required=True)
@click.option("--source", default="", help="Provenance label stamped on each record.")
@click.option("--location-tag", default="")
@click.option("--deployment-type", type=click.Choice(["fine-tuning", "rag"]), default="fine-tuning")
@click.option("--temperature", type=float, default=0.7, show_default=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
@engine_errors
def gen_sft(config_path, stub_seed, doc_paths, source, location_tag, deployment_type, temperature, out_path):
    """Generate instruction records from document text files."""
    config = _load_config(config_path)
    gateway = build_gateway(config, stub_seed=stub_seed)
    accepted = []
    rejected = 0
    for doc_path in doc_paths:
        text = Path(doc_path).read_text(encoding="utf-8")
        result = generate_from_document(
            gateway,
            doc_id=Path(doc_path).stem,
            document_text=text,
            source=source or Path(doc_path).name,
            location_tag=location_tag,
            deployment_type=deployment_type,
            temperature=temperature,
        )
        accepted.extend(result.accepted)
        rejected += len(result.rejected)
    write_dataset(accepted, out_path)
    click.echo(f"accepted {len(accepted)} records, rejected {rejected} replies")
    if not accepted:
        sys.exit(1)


def _load_eval_inputs(config, dataset_path, index_path, passages_path):
    dataset = load_dataset(dataset_path or config.dataset_path)
    built = load_index(index_path or config.index_path)
    passages = {p.passage_id: p for p in load_passages(passages_path or config.passages_path)}
    return dataset, built, passages


@cli.command("eval")
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(path_type=Path), default=None)
@click.option("--index", "index_path", type=click.Path(path_type=Path), default=None)
@click.option("--passages", "passages_path", type=click.Path(path_type=Path), default=None)
@click.option("--system", "system_name", type=click.Choice(sorted(SYSTEM_CHOICES)), default="base",
              show_default=True)
@click.option("--dataset-id", default="dataset", show_default=True)
@click.option("--run-id", default=None)
@click.option("--runs-dir", type=click.Path(path_type=Path), default=None)
@engine_errors
def eval_cmd(config_path, stub_seed, dataset_path, index_path, passages_path,
             system_name, dataset_id, run_id, runs_dir):
    """Evaluate one system configuration over a dataset."""
    config = _load_config(config_path)
    gateway = build_gateway(config, stub_seed=stub_seed)
    dataset, built, passages = _load_eval_inputs(config, dataset_path, index_path, passages_path)
    system = baseline_configs()[SYSTEM_CHOICES[system_name]]
    record = run_system(
        system,
        dataset,
        built,
        gateway,
        passages=passages,
        dataset_id=dataset_id,
        run_id=run_id,
        runs_dir=runs_dir or config.runs_dir,
    )
    markdown, _csv = emit_report([record], layout="main")
    click.echo(markdown, nl=False)
    if record.skipped:
        click.echo(f"skipped {record.skipped} samples", err=True)


@cli.command()
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(path_type=Path), default=None)
@click.option("--index", "index_path", type=click.Path(path_type=Path), default=None)
@click.option("--passages", "passages_path", type=click.Path(path_type=Path), default=None)
@click.option("--dataset-id", default="gsi", show_default=True)
@click.option("--runs-dir", type=click.Path(path_type=Path), default=None)
@engine_errors
def ablate(config_path, stub_seed, dataset_path, index_path, passages_path, dataset_id, runs_dir):
    """Run the three-arm knowledge-injection ablation."""
    config = _load_config(config_path)
    gateway = build_gateway(config, stub_seed=stub_seed)
    dataset, built, passages = _load_eval_inputs(config, dataset_path, index_path, passages_path)
    _records, markdown, _csv = run_ablation(
        dataset,
        built,
        gateway,
        passages,
        dataset_id=dataset_id,
        runs_dir=runs_dir or config.runs_dir,
    )
    click.echo(markdown, nl=False)


@cli.command()
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(path_type=Path), default=None)
@click.option("--csv", "as_csv", is_flag=True, help="Emit machine-readable CSV sections.")
@engine_errors
def stats(config_path, stub_seed, dataset_path, as_csv):
    """Print dataset composition statistics."""
    config = _load_config(config_path)
    records = load_dataset(dataset_path or config.dataset_path)
    summary = compute_stats(records)
    if as_csv:
        click.echo(stats_to_csv(summary), nl=False)
        return
    click.echo(f"total records: {summary.total}")
    for title, buckets in (
        ("deployment type", summary.by_deployment),
        ("task type", summary.by_task),
        ("source location", summary.by_location),
    ):
        click.echo(f"\n{title}:")
        for key, stat in buckets.items():
            click.echo(f"  {key}: {stat.count} ({stat.percent}%)")


@cli.command("export-train")
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(path_type=Path), default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@engine_errors
def export_train(config_path, stub_seed, dataset_path, out_dir, seed):
    """Split the dataset and export fine-tuning assets."""
    config = _load_config(config_path)
    records = load_dataset(dataset_path or config.dataset_path)
    train, val, test = split_dataset(records, seed=seed)
    paths = export_training_assets(train, val, out_dir or config.export_dir)
    click.echo(f"train={len(train)} val={len(val)} test={len(test)}")
    for path in paths:
        click.echo(str(path))


def _print_reply(kind: str, text: str, citations: list[str], grounded: bool) -> None:
    click.echo(text)
    if kind == "answer":
        if citations:
            click.echo(f"[sources: {', '.join(citations)}]")
        if not grounded:
            click.echo("[unverified against sources]")


@cli.command()
@common_options
@click.option("--server", "server_url", default=None, metavar="URL",
              help="Talk to a running service instead of loading artifacts in-process.")
@click.option("--profile", type=click.Choice(["engineer", "planner", "maintenance", "resident"]),
              default=None)
@click.option("--session", "session_id", default=None, help="Resume an existing session id.")
@engine_errors
def chat(config_path, stub_seed, server_url, profile, session_id):
    """Interactive chat REPL (reads stdin until EOF)."""
    config = _load_config(config_path)
    if server_url:
        _chat_over_http(server_url, profile, session_id)
        return
    gateway = build_gateway(config, stub_seed=stub_seed)
    built = load_index(config.index_path)
    passages = {p.passage_id: p for p in load_passages(config.passages_path)}
    store = SessionStore(config.sessions_dir)
    agent_config = AgentConfig(
        top_k=config.top_k,
        context_char_budget=config.context_char_budget,
        clarification_score_threshold=config.clarification_score_threshold,
    )
    session = store.load(session_id) if session_id and store.exists(session_id) else store.create(profile=profile)
    click.echo(f"session {session.session_id} (EOF or /quit to exit)", err=True)
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        if text == "/quit":
            break
        response = handle_turn(session, text, agent_config, built, gateway, passages)
        store.append_turn(session, text, response)
        _print_reply(response.kind, response.text, list(response.citations),
                     bool(response.constraint_flags.get("grounded")))


def _chat_over_http(server_url: str, profile: str | None, session_id: str | None) -> None:
    with httpx.Client(base_url=server_url.rstrip("/"), timeout=120.0) as client:
        click.echo("connected (EOF or /quit to exit)", err=True)
        for line in sys.stdin:
            text = line.strip()
            if not text:
                continue
            if text == "/quit":
                break
            body = {"text": text}
            if session_id:
                body["session_id"] = session_id
            if profile:
                body["profile"] = profile
            reply = client.post("/chat", json=body)
            if reply.status_code != 200:
                doc = reply.json()
                raise EngineError(f"{doc.get('code', reply.status_code)}: {doc.get('message', '')}")
            doc = reply.json()
            session_id = doc["session_id"]
            _print_reply(doc["kind"], doc["text"],
                         [c["passage_id"] for c in doc["citations"]], doc["grounded"])


@cli.command()
@common_options
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@engine_errors
def serve(config_path, stub_seed, host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import ServiceState, create_app

    config = _load_config(config_path)
    state = ServiceState.from_config(config, stub_seed=stub_seed)
    app = create_app(state)
    uvicorn.run(app, host=host or config.host, port=port or config.port)


main = cli

if __name__ == "__main__":
    main()
