"""Engine configuration: one JSON file describing where data lives and how
the model gateway is reached. Secrets never appear here — the HTTP gateway
reads credentials from environment variables only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import EngineError
from .gateway import Gateway, GatewayConfig, HttpGateway, StubGateway
from .retrieval import DEFAULT_TOP_K


class ConfigError(EngineError):
    code = "config_error"


@dataclass
class EngineConfig:
    data_dir: Path = Path("data")
    dataset_path: Path | None = None
    manifest_path: Path | None = None
    passages_path: Path | None = None
    index_path: Path | None = None
    sessions_dir: Path | None = None
    runs_dir: Path | None = None
    export_dir: Path | None = None
    top_k: int = DEFAULT_TOP_K
    context_char_budget: int = 4000
    clarification_score_threshold: float = 0.35
    stub_seed: int | None = None
    cors_origins: list[str] = field(default_factory=list)
    host: str = "127.0.0.1"
    port: int = 8000

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        defaults = {
            "dataset_path": "dataset.jsonl",
            "manifest_path": "manifest.jsonl",
            "passages_path": "passages.jsonl",
            "index_path": "index.jsonl",
            "sessions_dir": "sessions",
            "runs_dir": "runs",
            "export_dir": "export",
        }
        for name, leaf in defaults.items():
            value = getattr(self, name)
            setattr(self, name, self.data_dir / leaf if value is None else Path(value))

    @classmethod
    def load(cls, path: str | Path) -> "EngineConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


def build_gateway(config: EngineConfig, stub_seed: int | None = None) -> Gateway:
    """The configured gateway: a seeded stub when requested, otherwise the
    HTTP client configured from environment variables."""
    seed = stub_seed if stub_seed is not None else config.stub_seed
    if seed is not None:
        return StubGateway(seed=seed)
    return HttpGateway(GatewayConfig.from_env())
