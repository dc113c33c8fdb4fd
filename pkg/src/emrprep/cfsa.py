"""Cohort and feature selection agent.

The agent links the schema, probes the database with small SQL queries
until the linked schema and guideline are judged sufficient (or the round
budget runs out), generates the extraction SQL and routes failures back to
either SQL regeneration or schema re-linking.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .db import (
    Correct,
    ExecutionError,
    QueryExecutionError,
    QueryResult,
    ReadOnlyViolation,
    ResultStatus,
    SchemaSnapshot,
    Session,
    classify_result,
    execute_final,
    execute_observation,
    introspect_schema,
    render_foreign_keys,
    render_snapshot,
    render_value,
)
from .formats import FeatureFormatSpec
from .llm import LLMClient, temperature_for_round
from .parsing import (
    FEATURE_LABEL,
    MAPPING_LABEL,
    BudgetViolation,
    ErrorClass,
    LinkedSchema,
    MalformedResponse,
    parse_classification,
    parse_error_class,
    parse_linked_tables,
    parse_schema_linking,
    parse_sql_queries,
    parse_sql_query,
    parse_tagged_section,
    remove_tagged_section,
    serialize_linked_schema,
)
from .runlog import AgentFailure, Budgets, Transcript
from .sqltext import normalize_query
from .templates import DocumentBundle, TemplateLibrary, builtin_library

log = logging.getLogger(__name__)

T_LINK_MAPPING = "cfsa_schema_linking_mapping"
T_LINK_FEATURE = "cfsa_schema_linking_feature"
T_SUFFICIENCY = "cfsa_sql_sufficiency"
T_DATA = "cfsa_data_sufficiency"
T_UPDATE = "cfsa_update_schema"
T_GENERATE = "cfsa_sql_generation"
T_ERROR = "cfsa_error_feedback"

NEED_MORE = "need more information"
CORRECT = "correct"
ADD_INFO = "Add info"
NO_INFO = "No info"
NONE_TEXT = "None"


@dataclass(frozen=True)
class ClinicalRequest:
    cohort_selection: str
    feature_selection: str

    def __post_init__(self) -> None:
        if not self.cohort_selection.strip() or not self.feature_selection.strip():
            raise ValueError("cohort and feature selection must both be non-empty")
        FeatureFormatSpec.from_request_text(self.feature_selection)

    @property
    def spec(self) -> FeatureFormatSpec:
        return FeatureFormatSpec.from_request_text(self.feature_selection)

    def to_json(self) -> str:
        return json.dumps({"cohort_selection": self.cohort_selection,
                           "feature_selection": self.feature_selection}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ClinicalRequest":
        data = json.loads(text)
        return cls(data["cohort_selection"], data["feature_selection"])


def _render_outcome(result: QueryResult | ExecutionError) -> str:
    if isinstance(result, ExecutionError):
        return result.message
    return result.render()


@dataclass(frozen=True)
class ObservationRound:
    round_index: int
    temperature: float
    queries: tuple[str, ...]
    results: tuple[QueryResult | ExecutionError, ...]
    verdict: str = NO_INFO
    gained: str = ""

    def __post_init__(self) -> None:
        if len(self.queries) != len(self.results):
            raise ValueError("results must align with queries")

    def observation_text(self) -> str:
        return json.dumps({q: _render_outcome(r) for q, r in zip(self.queries, self.results)},
                          ensure_ascii=False)


@dataclass(frozen=True)
class ErrorFeedback:
    failed_sql: str
    message: str
    error_class: ErrorClass | None = None


@dataclass
class CfsaState:
    request: ClinicalRequest
    mapping_schema: LinkedSchema = field(default_factory=LinkedSchema)
    feature_schema: LinkedSchema = field(default_factory=LinkedSchema)
    guideline: str = ""
    observations: list[ObservationRound] = field(default_factory=list)
    error_feedback: ErrorFeedback | None = None
    retries_used: int = 0
    rounds_used: int = 0
    issued: set[str] = field(default_factory=set)

    def selected_schema_text(self) -> str:
        parts = [serialize_linked_schema(self.mapping_schema, MAPPING_LABEL),
                 serialize_linked_schema(self.feature_schema, FEATURE_LABEL)]
        return "\n".join(p for p in parts if p)

    def previous_observation_text(self, before: int | None = None) -> str:
        rounds = [r for r in self.observations if r.queries and (before is None or r.round_index < before)]
        return "\n".join(r.observation_text() for r in rounds) or NONE_TEXT

    def budgets_used(self) -> dict[str, int]:
        return {"rounds_used": self.rounds_used, "retries_used": self.retries_used}


@dataclass(frozen=True)
class Verdict:
    correct: bool
    queries: tuple[str, ...] = ()


@dataclass
class CohortResult:
    final_sql: str
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]
    spec: FeatureFormatSpec
    transcript: Transcript
    state: CfsaState

    def stay_ids(self) -> list:
        return [r[0] for r in self.rows]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.spec.names)
            for r in self.rows:
                w.writerow(["" if v is None else v for v in r])


def _strip_think(text: str) -> str:
    try:
        return remove_tagged_section(text, "think")
    except MalformedResponse:
        return text


class CfsaAgent:
    def __init__(self, client: LLMClient, session: Session, snapshot: SchemaSnapshot,
                 documents: DocumentBundle | None = None, budgets: Budgets | None = None,
                 transcript: Transcript | None = None, templates: TemplateLibrary | None = None,
                 row_cap: int = 20, parallel_probes: bool = False):
        self.client = client
        self.session = session
        self.snapshot = snapshot
        self.documents = documents or DocumentBundle()
        self.budgets = budgets or Budgets()
        self.transcript = transcript if transcript is not None else Transcript()
        self.templates = templates or builtin_library()
        self.row_cap = row_cap
        self.parallel_probes = parallel_probes
        self._schema_text = render_snapshot(snapshot)
        self._fk_text = render_foreign_keys(snapshot)

    # -- LLM plumbing --------------------------------------------------------

    def _ask(self, template_id: str, bindings: dict[str, str], round_index: int = 0,
             suffix: str = "") -> str:
        prompt = self.templates.render(template_id, bindings) + suffix
        request, text = self.client.complete(template_id, prompt, round_index)
        self.transcript.log("llm", template_id=template_id, temperature=request.temperature,
                            round_index=round_index, prompt=prompt, completion=text)
        return text

    def _ask_parsed(self, template_id, bindings, parse, round_index=0, suffix="", attempts=2):
        """Ask up to ``attempts`` times; raise the last MalformedResponse."""
        last: MalformedResponse | None = None
        for attempt in range(attempts):
            text = self._ask(template_id, bindings, round_index, suffix)
            try:
                return parse(text)
            except MalformedResponse as exc:
                last = exc
                self.transcript.log("malformed", template_id=template_id, attempt=attempt + 1,
                                    error=str(exc))
        assert last is not None
        raise last

    def _fail(self, state: CfsaState, phase: str, message: str) -> AgentFailure:
        self.transcript.log("terminal_failure", failed_phase=phase, error=message, **state.budgets_used())
        return AgentFailure(phase, message, state.budgets_used(), self.transcript)

    # -- schema linking ------------------------------------------------------

    def link_schema(self, state: CfsaState, feedback: str | None = None) -> None:
        self.transcript.log("link_schema", feedback=feedback)
        req = state.request
        bindings = {
            "Schema_information": self._schema_text,
            "Evaluation_Memo": self.documents.evaluation_memo,
            "Database_Manual": self.documents.database_manual,
            "Cohort_Selection": req.cohort_selection,
            "Feature_Selection": req.feature_selection,
        }
        suffix = f"\n[Error Feedback]: {feedback}\n" if feedback else ""
        try:
            mapping, mapping_guide = self._ask_parsed(T_LINK_MAPPING, bindings, parse_schema_linking,
                                                      suffix=suffix)
            feature, feature_guide = self._ask_parsed(T_LINK_FEATURE, bindings, parse_schema_linking,
                                                      suffix=suffix)
        except MalformedResponse as exc:
            raise self._fail(state, "link_schema", str(exc)) from exc
        state.mapping_schema, state.feature_schema = mapping, feature
        state.guideline = "\n".join(g for g in (mapping_guide, feature_guide) if g)
        self.transcript.log("linked_schema", schema=state.selected_schema_text(), guideline=state.guideline)

    # -- observation loop ----------------------------------------------------

    def _sufficiency_bindings(self, state: CfsaState) -> dict[str, str]:
        fb = state.error_feedback
        return {
            "Original_Schema": self._schema_text,
            "Selected_Schema": state.selected_schema_text(),
            "Target_Features": state.request.feature_selection,
            "Cohort_Selection": state.request.cohort_selection,
            "Mapping_Table": serialize_linked_schema(state.mapping_schema, MAPPING_LABEL) or NONE_TEXT,
            "Foreign_Key": self._fk_text,
            "Previous_Observation": state.previous_observation_text(),
            "Error_Feedback": f"[Failed SQL]: {fb.failed_sql}\n{fb.message}" if fb else NONE_TEXT,
            "Max_SQL_Search_At_Once": str(self.budgets.max_queries_per_round),
        }

    def _parse_sufficiency(self, text: str) -> Verdict:
        body = _strip_think(text)
        token = parse_classification(parse_tagged_section(body, "output"), (NEED_MORE, CORRECT))
        if token == CORRECT:
            return Verdict(True)
        section = parse_tagged_section(remove_tagged_section(body, "output"), "SQL queries")
        if section is None:
            return Verdict(False, ())
        return Verdict(False, tuple(parse_sql_queries(section, self.budgets.max_queries_per_round)))

    def assess_sufficiency(self, state: CfsaState) -> Verdict:
        round_index = state.rounds_used + 1
        self.transcript.log("assess", round_index=round_index)
        bindings = self._sufficiency_bindings(state)
        limit = self.budgets.max_queries_per_round
        verdict: Verdict | None = None
        suffix = ""
        for attempt in range(2):
            try:
                verdict = self._ask_parsed(T_SUFFICIENCY, bindings, self._parse_sufficiency,
                                           round_index, suffix, attempts=1)
                break
            except BudgetViolation as exc:
                self.transcript.log("budget_violation", round_index=round_index,
                                    listed=len(exc.queries), attempt=attempt + 1)
                if attempt == 0:
                    suffix = (f"\n[Note]: The previous answer listed {len(exc.queries)} SQL queries; "
                              f"list at most {limit}.\n")
                else:
                    verdict = Verdict(False, tuple(exc.queries[:limit]))
            except MalformedResponse as exc:
                if attempt == 1:
                    self._consume_retry(state, "assess", str(exc))
                    verdict = Verdict(False, ())
        assert verdict is not None
        if verdict.correct:
            self.transcript.log("verdict", round_index=round_index, verdict=CORRECT)
            return verdict
        fresh, seen = [], set(state.issued)
        for q in verdict.queries:
            key = normalize_query(q)
            if key in seen:
                continue
            seen.add(key)
            fresh.append(q)
        dropped = len(verdict.queries) - len(fresh)
        self.transcript.log("verdict", round_index=round_index, verdict=NEED_MORE,
                            queries=fresh, duplicates_dropped=dropped)
        return Verdict(False, tuple(fresh))

    def run_observation_round(self, state: CfsaState, queries: tuple[str, ...] | list[str]) -> ObservationRound:
        if not 1 <= len(queries) <= self.budgets.max_queries_per_round:
            raise ValueError(f"a round takes 1..{self.budgets.max_queries_per_round} queries")
        index = state.rounds_used + 1
        run = lambda q: execute_observation(self.session, q, self.row_cap)  # noqa: E731
        if self.parallel_probes and len(queries) > 1:
            with ThreadPoolExecutor(max_workers=len(queries)) as pool:
                results = tuple(pool.map(run, queries))
        else:
            results = tuple(run(q) for q in queries)
        rnd = ObservationRound(index, temperature_for_round(index),
                               tuple(queries), results)
        state.issued.update(normalize_query(q) for q in queries)
        state.observations.append(rnd)
        state.rounds_used = index
        self.transcript.log("observe", round_index=index, temperature=rnd.temperature,
                            queries=list(queries), results=[_render_outcome(r) for r in results])
        return rnd

    def _skip_round(self, state: CfsaState) -> None:
        index = state.rounds_used + 1
        state.observations.append(ObservationRound(index, temperature_for_round(index), (), ()))
        state.rounds_used = index
        self.transcript.log("observe", round_index=index, queries=[], results=[], skipped=True)

    def _parse_data(self, text: str) -> tuple[str, str]:
        body = _strip_think(text)
        token = parse_classification(parse_tagged_section(body, "output"), (ADD_INFO, NO_INFO))
        if token == NO_INFO:
            return NO_INFO, ""
        gained = parse_tagged_section(remove_tagged_section(body, "output"), ADD_INFO)
        if not gained:
            raise MalformedResponse("<Add info> verdict without gained information")
        return ADD_INFO, gained

    def check_data_sufficiency(self, state: CfsaState, rnd: ObservationRound) -> tuple[str, str]:
        self.transcript.log("check", round_index=rnd.round_index)
        bindings = {
            "Original_Schema": self._schema_text,
            "Selected_Schema": state.selected_schema_text(),
            "Target_Features": state.request.feature_selection,
            "Cohort_Selection": state.request.cohort_selection,
            "Previous_Observation": state.previous_observation_text(before=rnd.round_index),
            "SQL_Observation": rnd.observation_text(),
        }
        try:
            verdict, gained = self._ask_parsed(T_DATA, bindings, self._parse_data, rnd.round_index)
        except MalformedResponse:
            verdict, gained = NO_INFO, ""
        updated = replace(rnd, verdict=verdict, gained=gained)
        state.observations[state.observations.index(rnd)] = updated
        self.transcript.log("data_verdict", round_index=rnd.round_index, verdict=verdict, gained=gained)
        return verdict, gained

    def _parse_update(self, text: str) -> tuple[str, LinkedSchema | None, LinkedSchema | None]:
        body = _strip_think(text)
        guideline = parse_tagged_section(body, "edited schema guideline")
        schema_text = parse_tagged_section(body, "edited schema")
        if guideline is None or schema_text is None:
            raise MalformedResponse("edited schema or guideline section missing")
        mapping = feature = None
        try:
            mapping = parse_linked_tables(schema_text, [MAPPING_LABEL])
        except MalformedResponse:
            pass
        try:
            feature = parse_linked_tables(schema_text, [FEATURE_LABEL])
        except MalformedResponse:
            pass
        if mapping is None and feature is None:
            raise MalformedResponse("edited schema lists no tables")
        return guideline, mapping, feature

    def update_schema(self, state: CfsaState, gained: str) -> None:
        if not gained.strip():
            raise ValueError("update_schema needs gained information")
        self.transcript.log("update", previous_schema=state.selected_schema_text(),
                            previous_guideline=state.guideline)
        bindings = {
            "Selected_Schema": state.selected_schema_text(),
            "Schema_Guideline": state.guideline,
            "Additional_Information": gained,
            "Target_Features": state.request.feature_selection,
            "Cohort_Selection": state.request.cohort_selection,
        }
        try:
            guideline, mapping, feature = self._ask_parsed(T_UPDATE, bindings, self._parse_update, attempts=1)
        except MalformedResponse as exc:
            log.warning("schema update response malformed, keeping previous schema: %s", exc)
            self.transcript.log("schema_updated", kept_previous=True, error=str(exc))
            return
        state.guideline = guideline
        if mapping is not None:
            state.mapping_schema = mapping
        if feature is not None:
            state.feature_schema = feature
        self.transcript.log("schema_updated", kept_previous=False, schema=state.selected_schema_text(),
                            guideline=guideline)

    def observe(self, state: CfsaState) -> None:
        """Assess/probe/check/update until sufficient or the round budget is spent."""
        while state.rounds_used < self.budgets.max_rounds:
            verdict = self.assess_sufficiency(state)
            if verdict.correct:
                return
            if not verdict.queries:
                self._skip_round(state)
                continue
            rnd = self.run_observation_round(state, verdict.queries)
            kind, gained = self.check_data_sufficiency(state, rnd)
            if kind == ADD_INFO:
                self.update_schema(state, gained)
        self.transcript.log("forced_generation", rounds_used=state.rounds_used)

    # -- generation and error routing ---------------------------------------

    def _consume_retry(self, state: CfsaState, phase: str, message: str) -> None:
        state.retries_used += 1
        self.transcript.log("retry", failed_phase=phase, error=message, retries_used=state.retries_used)
        if state.retries_used >= self.budgets.max_retries:
            raise self._fail(state, phase, message)

    def generate_sql(self, state: CfsaState) -> str:
        self.transcript.log("generate_sql")
        fb = state.error_feedback
        bindings = {
            "Cohort_Selection": state.request.cohort_selection,
            "Target_Features": state.request.feature_selection,
            "Selected_Schema": state.selected_schema_text(),
            "Schema_Guideline": state.guideline,
            "Previous_Failed_SQL": fb.failed_sql if fb and fb.failed_sql else NONE_TEXT,
            "Error_Feedback": fb.message if fb else NONE_TEXT,
        }
        text = self._ask(T_GENERATE, bindings)
        sql = parse_sql_query(parse_tagged_section(_strip_think(text), "SQL query"))
        self.transcript.log("generated_sql", sql=sql)
        return sql

    def execute(self, state: CfsaState, sql: str) -> tuple[ResultStatus, QueryResult | None]:
        self.transcript.log("execute", sql=sql)
        try:
            result: QueryResult | ExecutionError = execute_final(self.session, sql)
        except (QueryExecutionError, ReadOnlyViolation) as exc:
            result = ExecutionError(getattr(exc, "message", str(exc)))
        status = classify_result(result, state.request.spec)
        rows = len(result.rows) if isinstance(result, QueryResult) else None
        self.transcript.log("execution", status=type(status).__name__, detail=status.describe(), rows=rows)
        return status, result if isinstance(result, QueryResult) else None

    def handle_error(self, state: CfsaState, failed_sql: str, status: ResultStatus) -> ErrorClass:
        """Count the failure and decide between regeneration and re-linking."""
        self._consume_retry(state, "execute", status.describe())
        if isinstance(status, ExecutionError):
            self.transcript.log("classify_error", message=status.message)
            bindings = {
                "Selected_Schema": state.selected_schema_text(),
                "Schema_Guideline": state.guideline,
                "Cohort_Selection": state.request.cohort_selection,
                "Target_Features": state.request.feature_selection,
                "Failed_SQL": failed_sql,
                "Error_Feedback": status.message,
            }
            parse = lambda t: parse_error_class(parse_tagged_section(_strip_think(t), "error class"))  # noqa: E731
            try:
                error_class = self._ask_parsed(T_ERROR, bindings, parse)
            except MalformedResponse:
                error_class = ErrorClass.WRONG_SCHEMA
        else:
            error_class = ErrorClass.WRONG_SCHEMA
        state.error_feedback = ErrorFeedback(failed_sql, status.describe(), error_class)
        self.transcript.log("route", error_class=error_class.value, retries_used=state.retries_used)
        return error_class

    def run(self, request: ClinicalRequest) -> CohortResult:
        state = CfsaState(request)
        self.transcript.log("start", cohort_selection=request.cohort_selection,
                            feature_selection=request.feature_selection,
                            budgets=asdict(self.budgets))
        self.link_schema(state)
        self.observe(state)
        while True:
            try:
                sql = self.generate_sql(state)
            except MalformedResponse as exc:
                state.error_feedback = ErrorFeedback(
                    "", f"The previous answer had no usable <SQL query> section: {exc}", None)
                self._consume_retry(state, "generate_sql", str(exc))
                continue
            status, result = self.execute(state, sql)
            if isinstance(status, Correct):
                assert result is not None
                self.transcript.log("done", final_sql=sql, rows=len(result.rows), **state.budgets_used())
                return CohortResult(sql, result.columns, result.rows, request.spec, self.transcript, state)
            route = self.handle_error(state, sql, status)
            if route is ErrorClass.WRONG_SCHEMA:
                self.link_schema(state, feedback=f"[Failed SQL]: {sql}\n{status.describe()}")
                self.observe(state)


def run_cfsa(request: ClinicalRequest, session: Session, client: LLMClient,
             documents: DocumentBundle | None = None, budgets: Budgets | None = None,
             samples_per_column: int = 10, transcript: Transcript | None = None,
             snapshot: SchemaSnapshot | None = None) -> CohortResult:
    snapshot = snapshot or introspect_schema(session, samples_per_column)
    agent = CfsaAgent(client, session, snapshot, documents, budgets, transcript)
    return agent.run(request)


__all__ = [
    "CfsaAgent", "CfsaState", "ClinicalRequest", "CohortResult", "ErrorFeedback",
    "ObservationRound", "Verdict", "run_cfsa", "render_value",
]
