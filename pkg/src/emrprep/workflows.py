"""Shared run plumbing for the CLI, the demos and the replay tests.

Everything here takes an explicit :class:`LLMClient`, so the same code path
runs against a live model, a cassette or a scripted responder.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .bench.fixtures import Fixture, load_fixture
from .bench.scenarios import (
    AdversaryResponder,
    CmaAdversaryResponder,
    ReferenceResponder,
    ADVERSARY_MODES,
    CMA_ADVERSARY_MODES,
)
from .cfsa import CfsaAgent, ClinicalRequest, CohortResult
from .cma import CmaAgent, FEATURE_SAMPLES
from .config import ConfigError, RunConfig
from .db import SchemaSnapshot, Session, connect, introspect_schema
from .integrate import (
    CohortArtifacts,
    EventStreamRow,
    FeatureLinking,
    Integrator,
    TimeRange,
    write_event_stream,
)
from .llm import Backend, Cassette, LiveBackend, LLMClient, RecordingBackend, ReplayBackend, ScriptedBackend
from .mapping import MappingResult, save_mapping
from .runlog import AgentFailure, Transcript
from .templates import DocumentBundle, load_documents

log = logging.getLogger(__name__)


def fixture_root(db_url: str) -> Path | None:
    """The fixture directory holding ``db_url``, when it is a built fixture."""
    path = Path(db_url.removeprefix("sqlite://").split("?")[0])
    root = path.parent
    return root if (root / "fixture.json").is_file() else None


def documents_for(config: RunConfig) -> DocumentBundle:
    """Configured documents, else the ones shipped in the fixture directory."""
    if not config.use_documents:
        return DocumentBundle()
    manual, memo = config.manual_path, config.memo_path
    root = fixture_root(config.db_url) if config.db_url else None
    if root is not None:
        manual = manual or str(root / "docs" / "manual.txt")
        memo = memo or str(root / "docs" / "memo.txt")
    try:
        bundle = load_documents(manual, memo)
    except FileNotFoundError as exc:
        raise ConfigError(f"document {exc.filename} does not exist") from exc
    if not (bundle.database_manual or bundle.evaluation_memo):
        log.warning("running without a database manual or evaluation memo")
    return bundle


@dataclass
class Workspace:
    """An open database plus what the agents read from it."""

    config: RunConfig
    session: Session
    documents: DocumentBundle
    fixture: Fixture | None = None
    _snapshots: dict[int, SchemaSnapshot] = field(default_factory=dict)

    def snapshot(self, samples: int) -> SchemaSnapshot:
        if samples not in self._snapshots:
            self._snapshots[samples] = introspect_schema(self.session, samples)
        return self._snapshots[samples]

    def close(self) -> None:
        self.session.close()


def open_workspace(config: RunConfig) -> Workspace:
    """Validate the config first, then connect; config errors never touch the database."""
    config.validate_for_run()
    documents = documents_for(config)
    session = connect(config.db_url)
    root = fixture_root(config.db_url)
    return Workspace(config, session, documents, load_fixture(root) if root else None)


def scripted_responder(fixture: Fixture | None, adversary: str | None = None):
    if fixture is None:
        raise ConfigError("scripted mode needs a database built by build-db (fixture.json next to it)")
    reference = ReferenceResponder(fixture)
    if adversary is None:
        return reference
    if adversary in ADVERSARY_MODES:
        return AdversaryResponder(reference, adversary)
    if adversary in CMA_ADVERSARY_MODES:
        return CmaAdversaryResponder(reference, adversary)
    raise ConfigError(f"unknown adversary {adversary!r}; choose from {ADVERSARY_MODES + CMA_ADVERSARY_MODES}")


def build_backend(config: RunConfig, fixture: Fixture | None, adversary: str | None = None,
                  record_to: Cassette | None = None) -> Backend:
    """Backend for ``config.backend``; ``record_to`` wraps it in a recorder."""
    if adversary is not None and config.backend == "live":
        raise ConfigError("adversaries are scripted; they cannot drive a live model")
    if config.backend == "replay":
        if record_to is not None:
            raise ConfigError("recording needs a live or scripted backend, not replay")
        return ReplayBackend(Cassette.load(config.cassette))
    if config.backend == "scripted":
        backend: Backend = ScriptedBackend(scripted_responder(fixture, adversary))
    else:
        live = LiveBackend(config.live_endpoint, config.live_model, config.api_key_env)
        live.check_credentials()
        backend = live
    return RecordingBackend(backend, record_to) if record_to is not None else backend


# -- cohort -------------------------------------------------------------------


@dataclass
class CohortOutcome:
    result: CohortResult | None
    failure: AgentFailure | None
    transcript: Transcript
    paths: list[Path]


def run_cohort(ws: Workspace, client: LLMClient, request: ClinicalRequest, out: str | Path) -> CohortOutcome:
    """Run the cohort agent and write final.sql, cohort.csv, transcript.jsonl, summary.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    transcript = Transcript()
    agent = CfsaAgent(client, ws.session, ws.snapshot(ws.config.samples_per_column), ws.documents,
                      ws.config.budgets(), transcript)
    summary: dict = {"request": json.loads(request.to_json()), "budgets": asdict(ws.config.budgets())}
    result: CohortResult | None = None
    failure: AgentFailure | None = None
    paths = []
    try:
        result = agent.run(request)
    except AgentFailure as exc:
        failure = exc
        summary.update(status="failed", failed_phase=exc.phase, last_error=exc.last_error,
                       budgets_used=exc.budgets_used)
    if result is not None:
        (out / "final.sql").write_text(result.final_sql + "\n", encoding="utf-8")
        result.to_csv(out / "cohort.csv")
        paths += [out / "final.sql", out / "cohort.csv"]
        summary.update(status="ok", rows=len(result.rows), columns=list(result.columns),
                       guideline=result.state.guideline, budgets_used=result.state.budgets_used())
    summary["llm_calls"] = len(transcript.llm_calls())
    transcript.save(out / "transcript.jsonl")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths += [out / "transcript.jsonl", out / "summary.json"]
    return CohortOutcome(result, failure, transcript, paths)


# -- mapping ------------------------------------------------------------------


@dataclass
class MappingOutcome:
    results: dict[str, MappingResult]
    transcripts: dict[str, Transcript]
    linking: dict[str, FeatureLinking]
    paths: list[Path]

    @property
    def all_failed(self) -> bool:
        return all(r.failed for r in self.results.values())


def linking_from_transcript(transcript: Transcript) -> FeatureLinking | None:
    events = transcript.of("linked_schema")
    if not events:
        return None
    e = events[-1]
    schema = "\n".join(s for s in (e.get("mapping", ""), e.get("feature", "")) if s)
    return FeatureLinking(schema or "None", e.get("guideline", "") or "None")


def run_mapping(ws: Workspace, client: LLMClient, features: Sequence[str], out: str | Path) -> MappingOutcome:
    """Map every feature; write mapping.json, cma_linking.json and one transcript per feature."""
    if not features:
        raise ValueError("the feature list is empty")
    out = Path(out)
    tdir = out / "transcripts"
    tdir.mkdir(parents=True, exist_ok=True)
    snapshot = ws.snapshot(FEATURE_SAMPLES)
    results: dict[str, MappingResult] = {}
    transcripts: dict[str, Transcript] = {}
    linking: dict[str, FeatureLinking] = {}
    paths = []
    for i, feature in enumerate(features):
        transcript = Transcript()
        transcripts[feature] = transcript
        agent = CmaAgent(client, ws.session, snapshot, ws.documents, ws.config.matching(), transcript)
        try:
            results[feature] = agent.run(feature)
        except AgentFailure as exc:
            log.warning("mapping %r failed: %s", feature, exc)
            results[feature] = MappingResult.absent(feature, failed=True, error=str(exc))
        link = linking_from_transcript(transcript)
        if link is not None:
            linking[feature] = link
        path = tdir / f"{i:03d}.jsonl"
        transcript.save(path)
        paths.append(path)
    save_mapping(results.values(), out / "mapping.json")
    (out / "cma_linking.json").write_text(
        json.dumps({f: asdict(v) for f, v in linking.items()}, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8")
    paths = [out / "mapping.json", out / "cma_linking.json", *paths]
    return MappingOutcome(results, transcripts, linking, paths)


def load_linking(path: str | Path) -> dict[str, FeatureLinking]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {f: FeatureLinking(v["schema"], v["guideline"]) for f, v in data.items()}


# -- integration --------------------------------------------------------------


def run_integration(ws: Workspace, client: LLMClient, cohort: CohortArtifacts,
                    mapping: dict[str, MappingResult], linking: dict[str, FeatureLinking],
                    features: Sequence[str], window: TimeRange, out: str | Path,
                    ) -> tuple[list[EventStreamRow], list[Path]]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    transcript = Transcript()
    rows = Integrator(client, ws.session, transcript).run(cohort, mapping, features, linking, window)
    write_event_stream(rows, out / "events.csv")
    transcript.save(out / "integration_transcript.jsonl")
    return rows, [out / "events.csv", out / "integration_transcript.jsonl"]
