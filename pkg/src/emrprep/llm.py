"""Completion backends and record/replay cassettes.

Three backends share one method, ``complete(request) -> str``:

* :class:`LiveBackend` posts to an OpenAI-style chat-completion endpoint.
* :class:`ReplayBackend` serves completions from a :class:`Cassette`.
* :class:`ScriptedBackend` calls a test-authored responder.

:class:`RecordingBackend` wraps any of them and appends each completion to a
cassette. Cassette entries are keyed by a content fingerprint; identical
requests are served in the order they were recorded.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Protocol

log = logging.getLogger(__name__)

MAX_ROUNDS = 10
FROZEN_ROUNDS = 5
TEMPERATURE_STEP = 0.1


class LLMError(RuntimeError):
    pass


class ReplayMiss(LLMError):
    def __init__(self, template_id: str, fingerprint: str):
        super().__init__(
            f"no recorded completion for template {template_id!r} (fingerprint {fingerprint})"
        )
        self.template_id = template_id
        self.fingerprint = fingerprint


class TransportError(LLMError):
    pass


class CredentialError(LLMError):
    pass


def temperature_for_round(round_index: int, max_rounds: int = MAX_ROUNDS) -> float:
    """0.0 for observation rounds 1-5, then +0.1 per round (0.5 at round 10)."""
    if not 1 <= round_index <= max_rounds:
        raise ValueError(f"observation round {round_index} is outside 1..{max_rounds}")
    return round(max(0, round_index - FROZEN_ROUNDS) * TEMPERATURE_STEP, 10)


@dataclass(frozen=True)
class CompletionRequest:
    prompt_text: str
    temperature: float = 0.0
    template_id: str = ""
    round_index: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 1]")
        if self.round_index > 0 and self.temperature != temperature_for_round(self.round_index):
            raise ValueError(
                f"round {self.round_index} requires temperature "
                f"{temperature_for_round(self.round_index)}, got {self.temperature}"
            )


def fingerprint(request: CompletionRequest) -> str:
    payload = json.dumps(
        [request.template_id, request.prompt_text, f"{request.temperature:.4f}"],
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CassetteMode(str, Enum):
    RECORD = "record"
    REPLAY = "replay"
    SCRIPTED = "scripted"


@dataclass
class CassetteEntry:
    fingerprint: str
    template_id: str
    temperature: float
    completion: str

    def to_line(self) -> str:
        return json.dumps(
            {
                "fingerprint": self.fingerprint,
                "template_id": self.template_id,
                "temperature": self.temperature,
                "completion": self.completion,
            },
            ensure_ascii=False,
            sort_keys=True,
        )


class Cassette:
    """Ordered fingerprint -> completion log, stored as JSON lines."""

    def __init__(self, entries: list[CassetteEntry] | None = None,
                 mode: CassetteMode = CassetteMode.REPLAY, path: Path | None = None):
        self.entries: list[CassetteEntry] = list(entries or [])
        self.mode = mode
        self.path = path
        self._lock = threading.Lock()
        self._queues: dict[str, deque[CassetteEntry]] = defaultdict(deque)
        for e in self.entries:
            self._queues[e.fingerprint].append(e)

    @staticmethod
    def partial_marker(path: Path) -> Path:
        return path.with_name(path.name + ".partial")

    @classmethod
    def load(cls, path: str | Path, mode: CassetteMode = CassetteMode.REPLAY) -> "Cassette":
        path = Path(path)
        if mode is CassetteMode.REPLAY and cls.partial_marker(path).exists():
            raise LLMError(f"cassette {path} is flagged partial and cannot be replayed")
        entries = []
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entries.append(CassetteEntry(**json.loads(line)))
        elif mode is CassetteMode.REPLAY:
            raise FileNotFoundError(f"cassette {path} does not exist")
        return cls(entries, mode, path)

    @classmethod
    def for_recording(cls, path: str | Path, overwrite: bool = False) -> "Cassette":
        """Open ``path`` for appending; existing entries are kept unless ``overwrite``."""
        path = Path(path)
        if overwrite and path.exists():
            path.unlink()
        cassette = cls.load(path, CassetteMode.RECORD)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.touch()
        return cassette

    def lookup(self, request: CompletionRequest) -> str:
        fp = fingerprint(request)
        with self._lock:
            queue = self._queues.get(fp)
            if not queue:
                raise ReplayMiss(request.template_id, fp)
            return queue.popleft().completion

    def append(self, request: CompletionRequest, completion: str) -> None:
        entry = CassetteEntry(fingerprint(request), request.template_id,
                              request.temperature, completion)
        with self._lock:
            self.entries.append(entry)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(entry.to_line() + "\n")

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(e.to_line() + "\n")


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> str: ...


class ReplayBackend:
    def __init__(self, cassette: Cassette):
        self.cassette = cassette

    def complete(self, request: CompletionRequest) -> str:
        return self.cassette.lookup(request)


class ScriptedBackend:
    """Completions come from ``responder(request)``."""

    def __init__(self, responder: Callable[[CompletionRequest], str]):
        self.responder = responder

    def complete(self, request: CompletionRequest) -> str:
        return self.responder(request)


class RecordingBackend:
    def __init__(self, inner: Backend, cassette: Cassette):
        self.inner = inner
        self.cassette = cassette

    def complete(self, request: CompletionRequest) -> str:
        try:
            completion = self.inner.complete(request)
        except Exception:
            # a cassette missing this answer must never be replayed as complete
            if self.cassette.path is not None:
                Cassette.partial_marker(self.cassette.path).touch()
            raise
        self.cassette.append(request, completion)
        return completion


@dataclass
class LiveBackend:
    """Generic chat-completion HTTP client.

    The API key is read from the environment variable named by
    ``api_key_env`` at call time and is never written anywhere.
    """

    endpoint: str
    model: str
    api_key_env: str = "EMRPREP_API_KEY"
    headers: Mapping[str, str] = field(default_factory=dict)
    timeout: float = 120.0
    transport_retries: int = 3
    backoff: float = 1.0

    def _api_key(self) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise CredentialError(f"environment variable {self.api_key_env} is not set")
        return key

    def check_credentials(self) -> None:
        self._api_key()

    def complete(self, request: CompletionRequest) -> str:
        import httpx

        headers = {"Authorization": f"Bearer {self._api_key()}", **self.headers}
        body = {
            "model": self.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": request.prompt_text}],
        }
        last: Exception | None = None
        for attempt in range(self.transport_retries + 1):
            try:
                resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
                if attempt < self.transport_retries:
                    delay = self.backoff * (2 ** attempt)
                    log.warning("completion transport failure (%s); retrying in %.1fs", exc, delay)
                    time.sleep(delay)
        raise TransportError(f"chat completion failed after retries: {last}") from last


class LLMClient:
    """Backend wrapper that counts calls and supplies the default temperature."""

    def __init__(self, backend: Backend, default_temperature: float = 0.0):
        self.backend = backend
        self.default_temperature = default_temperature
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, template_id: str, prompt_text: str, round_index: int = 0) -> tuple[CompletionRequest, str]:
        temperature = (
            temperature_for_round(round_index) if round_index > 0 else self.default_temperature
        )
        request = CompletionRequest(prompt_text, temperature, template_id, round_index)
        with self._lock:
            self.calls += 1
        return request, self.backend.complete(request)


def complete(request: CompletionRequest, backend: Backend) -> str:
    return backend.complete(request)
