"""Run transcripts, budgets and terminal agent failures."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from .llm import MAX_ROUNDS


@dataclass(frozen=True)
class Budgets:
    max_rounds: int = 10
    max_queries_per_round: int = 5
    max_retries: int = 5

    def __post_init__(self) -> None:
        if min(self.max_rounds, self.max_queries_per_round, self.max_retries) < 1:
            raise ValueError("all budgets must be >= 1")
        if self.max_rounds > MAX_ROUNDS:
            raise ValueError(f"the temperature schedule covers at most {MAX_ROUNDS} rounds")


class Transcript:
    """Append-only list of phase events, optionally mirrored to a JSONL file.

    Every event has ``seq`` and ``phase``; LLM calls are logged with phase
    ``llm`` and carry the template id, temperature, prompt and completion.
    """

    def __init__(self, path: str | Path | None = None):
        self.events: list[dict[str, Any]] = []
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def log(self, phase: str, **data: Any) -> dict[str, Any]:
        with self._lock:
            event = {"seq": len(self.events), "phase": phase, **data}
            self.events.append(event)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event, ensure_ascii=False, default=str) + "\n")
        return event

    def __iter__(self) -> Iterator[dict[str, Any]]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def phases(self) -> list[str]:
        return [e["phase"] for e in self.events]

    def of(self, phase: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["phase"] == phase]

    def llm_calls(self, template_id: str | None = None) -> list[dict[str, Any]]:
        return [e for e in self.of("llm") if template_id is None or e["template_id"] == template_id]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, ensure_ascii=False, default=str) + "\n" for e in self.events)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Transcript":
        t = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                t.events.append(json.loads(line))
        return t


@dataclass
class AgentFailure(RuntimeError):
    """Terminal failure: which phase gave up, what was consumed, the last error."""

    phase: str
    last_error: str
    budgets_used: dict[str, int] = field(default_factory=dict)
    transcript: Transcript | None = None

    def __post_init__(self) -> None:
        super().__init__(str(self))

    def __str__(self) -> str:
        used = ", ".join(f"{k}={v}" for k, v in self.budgets_used.items())
        return f"agent failed in phase {self.phase!r} ({used}): {self.last_error}"
