"""Code mapping agent.

For one standard feature the agent links the schema, checks whether the
feature is stored directly as a column, and otherwise lists candidate
(code, name, unit) tuples from the definition tables and keeps those an
LLM scores as similar enough, in two passes with rising thresholds.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .db import (
    QueryExecutionError,
    ReadOnlyViolation,
    SchemaSnapshot,
    Session,
    execute_final,
    introspect_schema,
    render_foreign_keys,
    render_snapshot,
)
from .llm import LLMClient
from .mapping import MappingResult, Outcome
from .parsing import (
    FEATURE_LABEL,
    MAPPING_LABEL,
    CandidateTuple,
    ColumnRef,
    LinkedSchema,
    MalformedResponse,
    locate_feature_section,
    parse_feature_column,
    parse_schema_linking,
    parse_similarity_map,
    parse_sql_queries,
    parse_tagged_section,
    remove_tagged_section,
    serialize_linked_schema,
)
from .runlog import AgentFailure, Transcript
from .templates import DocumentBundle, TemplateLibrary, builtin_library

log = logging.getLogger(__name__)

T_LINK_MAPPING = "cma_schema_linking_mapping"
T_LINK_FEATURE = "cma_schema_linking_feature"
T_LOCATE = "cma_feature_locating"
T_LIST = "cma_candidate_listing"
T_MATCH_FIRST = "cma_matching_first"
T_MATCH_SECOND = "cma_matching_second"

MAPPING_SAMPLES = 3
FEATURE_SAMPLES = 10
NONE_TEXT = "None"


@dataclass(frozen=True)
class MatchingConfig:
    pass1_threshold: int = 80
    user_threshold: int = 90
    batch_size: int = 50
    max_list_attempts: int = 5

    def __post_init__(self) -> None:
        if not 0 <= self.pass1_threshold <= self.user_threshold <= 100:
            raise ValueError("thresholds must satisfy 0 <= pass1 <= user <= 100")
        if self.batch_size < 1 or self.max_list_attempts < 1:
            raise ValueError("batch_size and max_list_attempts must be >= 1")


@dataclass
class CmaState:
    feature: str
    mapping_schema: LinkedSchema = field(default_factory=LinkedSchema)
    feature_schema: LinkedSchema = field(default_factory=LinkedSchema)
    mapping_guideline: str = ""
    feature_guideline: str = ""
    refs: list[ColumnRef] = field(default_factory=list)
    candidates: list[CandidateTuple] = field(default_factory=list)
    pass1: list[tuple[CandidateTuple, int]] = field(default_factory=list)
    pass2: list[tuple[CandidateTuple, int]] = field(default_factory=list)

    @property
    def guideline(self) -> str:
        return "\n".join(g for g in (self.mapping_guideline, self.feature_guideline) if g)


def normalize_literal(text: str) -> str:
    """Lowercase and drop everything that is not a letter or digit."""
    return re.sub(r"[^0-9a-z]", "", text.lower())


def literal_column_matches(feature: str, snapshot: SchemaSnapshot, min_length: int = 4) -> set[str]:
    """``table.column`` names whose normalized name contains the normalized
    feature or is contained in it (columns shorter than ``min_length`` are
    only matched exactly, so ``id`` never matches by containment)."""
    target = normalize_literal(feature)
    hits = set()
    for t in snapshot.tables:
        for c in t.columns:
            col = normalize_literal(c.name)
            if not col or not target:
                continue
            if col == target or target in col or (len(col) >= min_length and col in target):
                hits.add(f"{t.name}.{c.name}".lower())
    return hits


def render_candidates(candidates: Sequence[CandidateTuple]) -> str:
    return "[" + ", ".join(c.literal() for c in candidates) + "]"


def dedupe_candidates(candidates: Iterable[CandidateTuple]) -> list[CandidateTuple]:
    seen, out = set(), []
    for c in candidates:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def retain(scored: Iterable[tuple[CandidateTuple, int]], allowed: Iterable[CandidateTuple],
           threshold: int) -> list[tuple[CandidateTuple, int]]:
    """Scored pairs naming an allowed candidate with score >= threshold; the first qualifying pair per candidate is kept."""
    allowed = set(allowed)
    seen, out = set(), []
    for cand, score in scored:
        if cand in allowed and cand not in seen and score >= threshold:
            seen.add(cand)
            out.append((cand, score))
    return out


def finalize_mapping(feature: str, survivors: Sequence[tuple[CandidateTuple, int]]) -> MappingResult:
    """Pick the outcome variant from the shape of the surviving candidates."""
    if not survivors:
        return MappingResult.absent(feature)
    coded = [(c, s) for c, s in survivors if c.code is not None]
    if coded:
        if len(coded) < len(survivors):
            log.warning("%s: dropping %d survivors without a code", feature, len(survivors) - len(coded))
        return MappingResult(
            feature, Outcome.ROW_CODES,
            codes=tuple((c.code, c.name) for c, _ in coded),
            scores=tuple((c.code, s) for c, s in coded),
        )
    return MappingResult(
        feature, Outcome.NAMES_ONLY,
        names=tuple(c.name for c, _ in survivors),
        scores=tuple((c.name, s) for c, s in survivors),
    )


def _strip_think(text: str) -> str:
    try:
        return remove_tagged_section(text, "think")
    except MalformedResponse:
        return text


class CmaAgent:
    def __init__(self, client: LLMClient, session: Session, snapshot: SchemaSnapshot,
                 documents: DocumentBundle | None = None, config: MatchingConfig | None = None,
                 transcript: Transcript | None = None, templates: TemplateLibrary | None = None,
                 parallel_batches: bool = False):
        self.client = client
        self.session = session
        self.snapshot = snapshot
        self.documents = documents or DocumentBundle()
        self.config = config or MatchingConfig()
        self.transcript = transcript if transcript is not None else Transcript()
        self.templates = templates or builtin_library()
        self.parallel_batches = parallel_batches
        self._mapping_schema_text = render_snapshot(snapshot.limited(MAPPING_SAMPLES))
        self._feature_schema_text = render_snapshot(snapshot.limited(FEATURE_SAMPLES))

    def _ask(self, template_id: str, bindings: dict[str, str]) -> str:
        prompt = self.templates.render(template_id, bindings)
        request, text = self.client.complete(template_id, prompt)
        self.transcript.log("llm", template_id=template_id, temperature=request.temperature,
                            round_index=0, prompt=prompt, completion=text)
        return text

    def _ask_parsed(self, template_id, bindings, parse, attempts=2):
        last: MalformedResponse | None = None
        for attempt in range(attempts):
            text = self._ask(template_id, bindings)
            try:
                return parse(text)
            except MalformedResponse as exc:
                last = exc
                self.transcript.log("malformed", template_id=template_id, attempt=attempt + 1,
                                    error=str(exc))
        assert last is not None
        raise last

    def link_schema(self, state: CmaState) -> None:
        self.transcript.log("link_schema", feature=state.feature)
        docs = {"Evaluation_Memo": self.documents.evaluation_memo,
                "Database_Manual": self.documents.database_manual,
                "Feature_Selection": state.feature}
        try:
            mapping, mapping_guide = self._ask_parsed(
                T_LINK_MAPPING, {**docs, "Schema_information": self._mapping_schema_text}, parse_schema_linking)
            feature, feature_guide = self._ask_parsed(
                T_LINK_FEATURE, {**docs, "Schema_information": self._feature_schema_text}, parse_schema_linking)
        except MalformedResponse as exc:
            self.transcript.log("terminal_failure", failed_phase="link_schema", error=str(exc))
            raise AgentFailure("link_schema", str(exc), {}, self.transcript) from exc
        state.mapping_schema, state.mapping_guideline = mapping, mapping_guide
        state.feature_schema, state.feature_guideline = feature, feature_guide
        self.transcript.log("linked_schema",
                            mapping=serialize_linked_schema(mapping, MAPPING_LABEL),
                            feature=serialize_linked_schema(feature, FEATURE_LABEL),
                            guideline=state.guideline)

    def _parse_locate(self, text: str) -> list[ColumnRef] | None:
        refs = parse_feature_column(locate_feature_section(_strip_think(text)))
        if refs is None:
            return None
        for r in refs:
            if not self.snapshot.has_column(r.table, r.column):
                raise MalformedResponse(f"{r} does not exist in the database")
        return refs

    def locate_feature(self, state: CmaState) -> list[ColumnRef] | None:
        """Column references when the feature is stored as a column, else None."""
        self.transcript.log("locate", feature=state.feature)
        bindings = {
            "Target_Feature": state.feature,
            "Selected_Schema": serialize_linked_schema(state.feature_schema, FEATURE_LABEL),
            "Schema_Guideline": state.feature_guideline or NONE_TEXT,
        }
        try:
            refs = self._ask_parsed(T_LOCATE, bindings, self._parse_locate)
        except MalformedResponse as exc:
            log.warning("%s: feature locating failed, falling back to candidate listing: %s", state.feature, exc)
            refs = None
        state.refs = list(refs or [])
        self.transcript.log("located", refs=[str(r) for r in state.refs])
        return refs

    def _candidate_rows(self, text: str) -> list[str]:
        section = parse_tagged_section(_strip_think(text), "SQL queries")
        if section is None:
            section = parse_tagged_section(_strip_think(text), "SQL query")
        return parse_sql_queries(section, 5)

    def list_candidates(self, state: CmaState) -> list[CandidateTuple] | None:
        """Candidate tuples; None when every attempt failed."""
        failed_sql, error = NONE_TEXT, NONE_TEXT
        for attempt in range(1, self.config.max_list_attempts + 1):
            self.transcript.log("list_candidates", attempt=attempt, failed_sql=failed_sql, error_feedback=error)
            bindings = {
                "Target_Feature": state.feature,
                "Definition_Schema": serialize_linked_schema(state.mapping_schema, MAPPING_LABEL) or NONE_TEXT,
                "Feature_Schema": serialize_linked_schema(state.feature_schema, FEATURE_LABEL) or NONE_TEXT,
                "Schema_Guideline": state.guideline or NONE_TEXT,
                "Relation_Information": render_foreign_keys(self.snapshot),
                "Failed_SQL": failed_sql,
                "Error_Feedback": error,
            }
            text = self._ask(T_LIST, bindings)
            try:
                queries = self._candidate_rows(text)
                if not queries:
                    raise MalformedResponse("no candidate listing query given")
            except MalformedResponse as exc:
                failed_sql, error = NONE_TEXT, f"The answer could not be used: {exc}"
                self.transcript.log("candidates_failed", attempt=attempt, error=error)
                continue
            try:
                tuples = []
                for q in queries:
                    result = execute_final(self.session, q)
                    if not 1 <= len(result.columns) <= 3:
                        raise QueryExecutionError(
                            f"expected 1-3 columns (code, name, unit), got {len(result.columns)}")
                    for row in result.rows:
                        try:
                            tuples.append(CandidateTuple.from_values(tuple(row)))
                        except ValueError:
                            continue
            except (QueryExecutionError, ReadOnlyViolation) as exc:
                failed_sql = " || ".join(queries)
                error = getattr(exc, "message", str(exc))
                self.transcript.log("candidates_failed", attempt=attempt, sql=failed_sql, error=error)
                continue
            state.candidates = dedupe_candidates(tuples)
            self.transcript.log("candidates", sql=queries, count=len(state.candidates))
            return state.candidates
        return None

    def _score_batch(self, template_id: str, feature_key: str, feature: str,
                     batch: list[CandidateTuple], threshold: int) -> list[tuple[CandidateTuple, int]]:
        bindings = {feature_key: feature, "Candidate_Features": render_candidates(batch),
                    "User_defined_threshold": str(threshold)}

        def parse(text: str) -> list[tuple[CandidateTuple, int]]:
            body = _strip_think(text)
            tagged = parse_tagged_section(body, "Similarity Probabilities")
            smap = parse_similarity_map(tagged if tagged is not None else body, default_feature=feature)
            return [pair for pairs in smap.values() for pair in pairs]

        try:
            scored = self._ask_parsed(template_id, bindings, parse)
        except MalformedResponse as exc:
            log.warning("%s: dropping a batch of %d candidates after malformed scoring: %s",
                        feature, len(batch), exc)
            self.transcript.log("batch_dropped", template_id=template_id, size=len(batch), error=str(exc))
            return []
        unknown = [c.literal() for c, _ in scored if c not in set(batch)]
        if unknown:
            self.transcript.log("unknown_candidates", template_id=template_id, candidates=unknown)
        return retain(scored, batch, threshold)

    def match_candidates(self, feature: str, candidates: Sequence[CandidateTuple], threshold: int,
                         second_pass: bool = False) -> list[tuple[CandidateTuple, int]]:
        """Score candidates batch by batch, keeping pairs scored >= threshold."""
        if not 0 <= threshold <= 100:
            raise ValueError("threshold must be in 0..100")
        template_id, key = ((T_MATCH_SECOND, "Target_Feature") if second_pass
                            else (T_MATCH_FIRST, "Targeting_Feature"))
        size = self.config.batch_size
        batches = [list(candidates[i:i + size]) for i in range(0, len(candidates), size)]
        self.transcript.log("match", feature=feature, threshold=threshold, second_pass=second_pass,
                            batches=len(batches))
        run = lambda b: self._score_batch(template_id, key, feature, b, threshold)  # noqa: E731
        if self.parallel_batches and len(batches) > 1:
            with ThreadPoolExecutor(max_workers=min(8, len(batches))) as pool:
                results = list(pool.map(run, batches))
        else:
            results = [run(b) for b in batches]
        merged = retain((p for r in results for p in r), candidates, threshold)
        self.transcript.log("matched", threshold=threshold, retained=[[c.literal(), s] for c, s in merged])
        return merged

    def run(self, feature: str) -> MappingResult:
        state = CmaState(feature)
        self.transcript.log("start", feature=feature, config=vars(self.config).copy())
        self.link_schema(state)
        refs = self.locate_feature(state)
        if refs:
            seen: list[str] = []
            for r in refs:
                if r.table_column not in seen:
                    seen.append(r.table_column)
            result = MappingResult(feature, Outcome.COLUMN_REFS, refs=tuple(seen))
            self.transcript.log("done", outcome=result.outcome.value)
            return result
        candidates = self.list_candidates(state)
        if candidates is None:
            message = f"candidate listing failed {self.config.max_list_attempts} times"
            self.transcript.log("done", outcome=Outcome.ABSENT.value, failed=True, error=message)
            return MappingResult.absent(feature, failed=True, error=message)
        if not candidates:
            self.transcript.log("done", outcome=Outcome.ABSENT.value)
            return MappingResult.absent(feature)
        state.pass1 = self.match_candidates(feature, candidates, self.config.pass1_threshold)
        survivors = [c for c, _ in state.pass1]
        state.pass2 = (self.match_candidates(feature, survivors, self.config.user_threshold, second_pass=True)
                       if survivors else [])
        result = finalize_mapping(feature, state.pass2)
        self.transcript.log("done", outcome=result.outcome.value, items=sorted(result.items()))
        return result


def run_cma(feature: str, session: Session, client: LLMClient, documents: DocumentBundle | None = None,
            config: MatchingConfig | None = None, transcript: Transcript | None = None,
            snapshot: SchemaSnapshot | None = None) -> MappingResult:
    snapshot = snapshot or introspect_schema(session, FEATURE_SAMPLES)
    return CmaAgent(client, session, snapshot, documents, config, transcript).run(feature)


def run_cma_features(features: Sequence[str], session: Session, client: LLMClient,
                     documents: DocumentBundle | None = None, config: MatchingConfig | None = None,
                     snapshot: SchemaSnapshot | None = None,
                     ) -> tuple[dict[str, MappingResult], dict[str, Transcript]]:
    """Map each feature in turn; a terminal failure becomes a flagged Absent."""
    if not features:
        raise ValueError("the feature list is empty")
    snapshot = snapshot or introspect_schema(session, FEATURE_SAMPLES)
    results: dict[str, MappingResult] = {}
    transcripts: dict[str, Transcript] = {}
    for feature in features:
        transcript = Transcript()
        transcripts[feature] = transcript
        agent = CmaAgent(client, session, snapshot, documents, config, transcript)
        try:
            results[feature] = agent.run(feature)
        except AgentFailure as exc:
            log.warning("mapping %r failed: %s", feature, exc)
            results[feature] = MappingResult.absent(feature, failed=True, error=str(exc))
    return results, transcripts
