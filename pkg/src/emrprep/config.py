"""Run configuration: one JSON file, defaults pre-filled, credentials from the environment only."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from .cma import MatchingConfig
from .runlog import Budgets

BACKENDS = ("live", "replay", "scripted")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    db_url: str | None = None
    backend: str = "replay"
    cassette: str | None = None
    max_rounds: int = 10
    max_queries_per_round: int = 5
    max_retries: int = 5
    samples_per_column: int = 10
    pass1_threshold: int = 80
    user_threshold: int = 90
    batch_size: int = 50
    manual_path: str | None = None
    memo_path: str | None = None
    use_documents: bool = True
    output_dir: str = "out"
    live_endpoint: str | None = None
    live_model: str | None = None
    api_key_env: str = "EMRPREP_API_KEY"

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.samples_per_column < 1:
            raise ConfigError("samples_per_column must be >= 1")
        try:
            self.budgets()
            self.matching()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def budgets(self) -> Budgets:
        return Budgets(self.max_rounds, self.max_queries_per_round, self.max_retries)

    def matching(self) -> MatchingConfig:
        return MatchingConfig(self.pass1_threshold, self.user_threshold, self.batch_size, self.max_retries)

    def validate_for_run(self) -> None:
        """Checks that need no database or network access."""
        if not self.db_url:
            raise ConfigError("no database endpoint configured (use --db-url or db_url)")
        if self.backend == "replay":
            if not self.cassette:
                raise ConfigError("replay mode needs a cassette (use --cassette)")
            if not Path(self.cassette).is_file():
                raise ConfigError(f"cassette {self.cassette} does not exist")
        if self.backend == "live" and not (self.live_endpoint and self.live_model):
            raise ConfigError("live mode needs live_endpoint and live_model in the config")

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if any("key" in k.lower() and k != "api_key_env" for k in data):
            raise ConfigError("credentials belong in the environment, not the config file")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)
