"""Event-stream integration of a cohort query with mapped feature codes.

For each requested feature the integration prompt combines the cohort SQL,
the mapping agent's schema linking and the selected codes into one query
returning ``(stay_id, timestamp_offset, event_type, value)`` rows. The
rows are checked mechanically before they are accepted.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .db import QueryExecutionError, ReadOnlyViolation, Session, execute_final
from .llm import LLMClient
from .mapping import MappingResult, Outcome
from .parsing import MalformedResponse, parse_sql_query, parse_tagged_section
from .runlog import Transcript
from .templates import TemplateLibrary, builtin_library

log = logging.getLogger(__name__)

T_INTEGRATION = "integration"
EVENT_COLUMNS = ("stay_id", "timestamp_offset", "event_type", "value")


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeRange:
    """Inclusive window in minutes relative to ICU admission."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise ValueError("time range start is after its end")

    def render(self) -> str:
        return f"{self.start} to {self.end} minutes after ICU admission (inclusive)"

    @classmethod
    def parse(cls, text: str) -> "TimeRange":
        """``START:END`` in minutes, e.g. ``0:1440``."""
        try:
            a, b = text.split(":")
            return cls(int(a), int(b))
        except ValueError as exc:
            raise ValueError(f"time range must look like START:END in minutes, got {text!r}") from exc


@dataclass(frozen=True)
class EventStreamRow:
    stay_id: Any
    timestamp_offset: int
    event_type: str
    value: Any

    def sort_key(self) -> tuple:
        return (_id_key(self.stay_id), self.timestamp_offset, self.event_type, _value_key(self.value))


def _id_key(value: Any) -> tuple:
    text = str(value)
    return (0, int(text), "") if text.lstrip("-").isdigit() else (1, 0, text)


def _value_key(value: Any) -> tuple:
    if isinstance(value, (int, float)):
        return (0, float(value), "")
    return (1, 0.0, "" if value is None else str(value))


def _norm_id(value: Any) -> str:
    text = str(value).strip()
    try:
        f = float(text)
    except ValueError:
        return text
    return str(int(f)) if f.is_integer() else text


@dataclass(frozen=True)
class CohortArtifacts:
    """What the cohort agent left on disk that integration needs."""

    final_sql: str
    guideline: str
    stay_column: str
    stay_ids: frozenset[str]

    @classmethod
    def from_result(cls, result: Any) -> "CohortArtifacts":
        """From an in-memory cohort agent result."""
        return cls(result.final_sql, result.state.guideline, result.spec.names[0],
                   frozenset(_norm_id(i) for i in result.stay_ids()))

    @classmethod
    def load(cls, directory: str | Path) -> "CohortArtifacts":
        d = Path(directory)
        missing = [n for n in ("final.sql", "cohort.csv", "summary.json") if not (d / n).is_file()]
        if missing:
            raise FileNotFoundError(f"cohort artifacts in {d} lack {', '.join(missing)}")
        summary = json.loads((d / "summary.json").read_text(encoding="utf-8"))
        with open(d / "cohort.csv", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            ids = frozenset(_norm_id(r[0]) for r in reader if r)
        return cls((d / "final.sql").read_text(encoding="utf-8").strip(), summary.get("guideline", ""),
                   header[0], ids)


@dataclass(frozen=True)
class FeatureLinking:
    schema: str
    guideline: str


def render_mapping_codes(result: MappingResult) -> str:
    if result.outcome is Outcome.ROW_CODES:
        return json.dumps([list(c) for c in result.codes], ensure_ascii=False)
    if result.outcome is Outcome.NAMES_ONLY:
        return json.dumps(list(result.names), ensure_ascii=False)
    if result.outcome is Outcome.COLUMN_REFS:
        return json.dumps(list(result.refs), ensure_ascii=False)
    raise IntegrationError(f"feature {result.feature!r} has no mapped codes")


def validate_stream(columns: Sequence[str], rows: Sequence[Sequence[Any]], feature: str,
                    cohort_ids: frozenset[str], window: TimeRange) -> list[str]:
    """Problems with one feature's integration output; empty when valid."""
    problems = []
    if len(columns) != len(EVENT_COLUMNS):
        return [f"expected {len(EVENT_COLUMNS)} columns {EVENT_COLUMNS}, got {len(columns)}"]
    for r in rows:
        stay, offset, kind, _ = r
        if offset is None:
            problems.append(f"row for stay {stay} has no timestamp")
        elif not isinstance(offset, int) or not window.start <= offset <= window.end:
            problems.append(f"row for stay {stay} has offset {offset!r} outside {window.render()}")
        if kind != feature:
            problems.append(f"event type {kind!r} is not the requested feature {feature!r}")
        if _norm_id(stay) not in cohort_ids:
            problems.append(f"stay {stay} is not in the cohort")
        if len(problems) >= 5:
            break
    return problems


class Integrator:
    def __init__(self, client: LLMClient, session: Session, transcript: Transcript | None = None,
                 templates: TemplateLibrary | None = None):
        self.client = client
        self.session = session
        self.transcript = transcript if transcript is not None else Transcript()
        self.templates = templates or builtin_library()

    def _bindings(self, cohort: CohortArtifacts, feature: str, result: MappingResult,
                  linking: FeatureLinking, window: TimeRange) -> dict[str, str]:
        codes = render_mapping_codes(result)
        return {
            "user_requested_event_stream_dataset": (
                f"an event stream dataset ({', '.join(EVENT_COLUMNS)}) for the stays returned by "
                f'[CFSA Generated SQL] (stay identifier column "{cohort.stay_column}"), with '
                "timestamp_offset in whole minutes since ICU admission and event_type set to the feature name"
            ),
            "cma_schema_linking": linking.schema,
            "cma_schema_guideline": linking.guideline,
            "selected_mapping_codes": codes,
            "target_time_range": window.render(),
            "cfsa_generated_sql": cohort.final_sql,
            "cfsa_schema_guideline": cohort.guideline,
            "Target_Feature": feature,
            "final_output_columns": ", ".join(EVENT_COLUMNS),
        }

    def feature_rows(self, cohort: CohortArtifacts, feature: str, result: MappingResult,
                     linking: FeatureLinking, window: TimeRange) -> list[EventStreamRow]:
        prompt = self.templates.render(T_INTEGRATION, self._bindings(cohort, feature, result, linking, window))
        suffix = ""
        last_error = ""
        for attempt in range(2):
            text_prompt = prompt + suffix
            request, text = self.client.complete(T_INTEGRATION, text_prompt)
            self.transcript.log("llm", template_id=T_INTEGRATION, temperature=request.temperature,
                                round_index=0, prompt=text_prompt, completion=text)
            sql = ""
            try:
                sql = parse_sql_query(parse_tagged_section(text, "sql_query"))
                result_set = execute_final(self.session, sql)
                problems = validate_stream(result_set.columns, result_set.rows, feature,
                                           cohort.stay_ids, window)
                if problems:
                    raise IntegrationError("; ".join(problems))
            except (MalformedResponse, QueryExecutionError, ReadOnlyViolation, IntegrationError) as exc:
                last_error = getattr(exc, "message", str(exc))
                self.transcript.log("integration_failed", feature=feature, attempt=attempt + 1,
                                    sql=sql, error=last_error)
                suffix = f"\n[Failed SQL]: {sql or 'None'}\n[Error Feedback]: {last_error}\n"
                continue
            self.transcript.log("integrated", feature=feature, sql=sql, rows=len(result_set.rows))
            return [EventStreamRow(*r) for r in result_set.rows]
        raise IntegrationError(f"integration for {feature!r} failed twice: {last_error}")

    def run(self, cohort: CohortArtifacts, mapping: Mapping[str, MappingResult], features: Sequence[str],
            linking: Mapping[str, FeatureLinking], window: TimeRange) -> list[EventStreamRow]:
        if not features:
            raise IntegrationError("no features requested")
        for f in features:
            r = mapping.get(f)
            if r is None or r.outcome is Outcome.ABSENT:
                raise IntegrationError(f"feature {f!r} has no mapping; run the mapping agent for it first")
        rows: list[EventStreamRow] = []
        for f in features:
            link = linking.get(f, FeatureLinking("None", "None"))
            rows.extend(self.feature_rows(cohort, f, mapping[f], link, window))
        rows.sort(key=EventStreamRow.sort_key)
        if not rows:
            log.warning("the event stream is empty for %s", window.render())
        return rows


def write_event_stream(rows: Sequence[EventStreamRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for r in rows:
            w.writerow([r.stay_id, r.timestamp_offset, r.event_type, r.value])


def read_event_stream(path: str | Path) -> list[tuple[str, str, str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != EVENT_COLUMNS:
            raise ValueError(f"{path} is not an event stream file")
        return [tuple(r) for r in reader]
