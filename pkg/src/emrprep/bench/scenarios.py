"""Scripted responders that stand in for the LLM on fixture databases.

``ReferenceResponder`` answers every prompt the agents send the way a
competent model would for a given fixture: it links the right tables,
probes coded values, writes a correct extraction query and scores mapping
candidates from the fixture's ground truth. It reads only the prompt text
plus the fixture, so recording it into a cassette and replaying the
cassette gives the same run.

``AdversaryResponder`` wraps the reference and misbehaves in one scripted
way (too many probes, never satisfied, failing SQL, malformed answers) to
exercise the agents' budgets and error routing.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass
from typing import Callable

from ..cfsa import ClinicalRequest
from ..cma import normalize_literal
from ..formats import FeatureFormatSpec, FeatureKind
from ..llm import CompletionRequest
from ..parsing import CandidateTuple, MalformedResponse, parse_linked_tables
from .catalog import Style
from .cohort import (
    STANDARD_SPEC,
    CohortCriteria,
    GenderFilter,
    MultipleStayMode,
    glucose_criterion,
)
from .fixtures import Fixture

# -- request scenarios ---------------------------------------------------------


@dataclass(frozen=True)
class RequestScenario:
    name: str
    criteria: CohortCriteria
    spec: FeatureFormatSpec

    @property
    def request(self) -> ClinicalRequest:
        return ClinicalRequest(self.criteria.describe(), self.spec.to_request_text())


def _spec(*kinds: FeatureKind) -> FeatureFormatSpec:
    by_kind = {f.kind: f.name for f in STANDARD_SPEC.features}
    return FeatureFormatSpec.of(*((by_kind[k], k) for k in kinds))


def standard_scenarios(fixture: Fixture) -> list[RequestScenario]:
    """Three request shapes: age and gender, minimum stay length, minimum record count."""
    k = FeatureKind
    return [
        RequestScenario(
            "age_gender",
            CohortCriteria(age_range=(19, 29), gender_filter=GenderFilter.MALE),
            _spec(k.IDENTIFIER, k.GENDER, k.INTEGER),
        ),
        RequestScenario(
            "min_duration",
            CohortCriteria(min_stay_hours=48, exclude_missing_discharge=True),
            _spec(k.IDENTIFIER, k.GENDER, k.INTEGER, k.FLOAT4),
        ),
        RequestScenario(
            "min_records",
            CohortCriteria(min_clinical_records=glucose_criterion(fixture, 15)),
            _spec(k.IDENTIFIER, k.GENDER, k.INTEGER, k.MORTALITY),
        ),
    ]


def scenario_by_name(fixture: Fixture, name: str) -> RequestScenario:
    for s in standard_scenarios(fixture):
        if s.name == name:
            return s
    raise KeyError(f"unknown scenario {name!r}")


# -- reference cohort SQL ------------------------------------------------------


@dataclass(frozen=True)
class _StayExprs:
    source: str
    stay: str
    patient: str
    order: str
    gender: str
    age: str
    los_hours: str
    los_minutes: str
    mortality: str
    missing_discharge: str
    missing_gender: str


_STAY_EXPRS = {
    Style.MIMIC_LIKE: _StayExprs(
        source="icustays AS i JOIN patients AS p ON p.subject_id = i.subject_id "
               "JOIN admissions AS a ON a.hadm_id = i.hadm_id",
        stay="i.icustay_id", patient="i.subject_id", order="i.intime, i.icustay_id",
        gender="CASE p.gender WHEN 'M' THEN 'Male' WHEN 'F' THEN 'Female' ELSE 'Unknown' END",
        age="CAST((julianday(i.intime) - julianday(p.dob)) / 365.25 AS INTEGER)",
        los_hours="ROUND((julianday(i.outtime) - julianday(i.intime)) * 24, 4)",
        los_minutes="ROUND((julianday(i.outtime) - julianday(i.intime)) * 1440)",
        mortality="CASE a.hospital_expire_flag WHEN 1 THEN 'Dead' WHEN 0 THEN 'Alive' ELSE 'Unknown' END",
        missing_discharge="i.outtime IS NULL", missing_gender="p.gender IS NULL",
    ),
    Style.EICU_LIKE: _StayExprs(
        source="patient AS p",
        stay="p.patientunitstayid", patient="p.uniquepid", order="p.unitvisitnumber, p.patientunitstayid",
        gender="CASE p.gender WHEN 'Male' THEN 'Male' WHEN 'Female' THEN 'Female' ELSE 'Unknown' END",
        age="CASE WHEN p.age = '> 89' THEN 90 ELSE CAST(p.age AS INTEGER) END",
        los_hours="ROUND(p.unitdischargeoffset / 60.0, 4)",
        los_minutes="p.unitdischargeoffset",
        mortality="CASE p.hospitaldischargestatus WHEN 'Expired' THEN 'Dead' "
                  "WHEN 'Alive' THEN 'Alive' ELSE 'Unknown' END",
        missing_discharge="p.unitdischargeoffset IS NULL",
        missing_gender="(p.gender IS NULL OR p.gender = '')",
    ),
    Style.SIC_LIKE: _StayExprs(
        source="cases AS c",
        stay="c.caseid", patient="c.patientid", order="c.caseid",
        gender="CASE c.sex WHEN 23 THEN 'Male' WHEN 24 THEN 'Female' ELSE 'Unknown' END",
        age="c.ageonadmission",
        los_hours="ROUND(c.timeofstay / 3600.0, 4)",
        los_minutes="c.timeofstay / 60.0",
        mortality="CASE c.dischargestate WHEN 2215 THEN 'Dead' WHEN 2202 THEN 'Alive' ELSE 'Unknown' END",
        missing_discharge="c.timeofstay IS NULL", missing_gender="c.sex IS NULL",
    ),
}

# measurement table -> (stay column, item key column, time expression, value expression, join)
_EVENT_SOURCES = {
    "chartevents": ("e.icustay_id", "e.itemid",
                    "CAST(ROUND((julianday(e.charttime) - julianday(i.intime)) * 1440) AS INTEGER)",
                    "e.valuenum", "JOIN icustays AS i ON i.icustay_id = e.icustay_id"),
    "labevents": ("e.icustay_id", "e.itemid",
                  "CAST(ROUND((julianday(e.charttime) - julianday(i.intime)) * 1440) AS INTEGER)",
                  "e.valuenum", "JOIN icustays AS i ON i.icustay_id = e.icustay_id"),
    "lab": ("e.patientunitstayid", "e.labname", "e.labresultoffset", "e.labresult", ""),
    "nursecharting": ("e.patientunitstayid", "e.nursingchartcelltypevalname", "e.nursingchartoffset",
                      "CAST(e.nursingchartvalue AS REAL)", ""),
    "laboratory": ("e.caseid", "e.laboratoryid", 'e."offset" / 60', "e.laboratoryvalue", ""),
    "data_float_h": ("e.caseid", "e.dataid", 'e."offset" / 60', "e.val", ""),
    "vitalperiodic": ("e.patientunitstayid", None, "e.observationoffset", None, ""),
    "patient": ("e.patientunitstayid", None, None, None, ""),
    "cases": ("e.caseid", None, None, None, ""),
}


def sql_literal(value: str) -> str:
    if value.isdigit():
        return value
    return "'" + value.replace("'", "''") + "'"


def quote_alias(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def _record_rows_sql(fixture: Fixture, keys: tuple[str, ...]) -> str:
    """One stay-id row per event row carrying any of ``keys``."""
    by_table: dict[str, list[str]] = {}
    parts = []
    for key in keys:
        item = fixture.item(key)
        if item.group == "columns":
            table, column = key.split(".")
            stay = _EVENT_SOURCES[table][0]
            parts.append(f"SELECT {stay} AS stay_id FROM {table} AS e WHERE e.{column} IS NOT NULL")
        else:
            by_table.setdefault(item.table, []).append(key)
    for table, table_keys in by_table.items():
        stay, key_col = _EVENT_SOURCES[table][:2]
        values = ", ".join(sql_literal(k) for k in table_keys)
        parts.append(f"SELECT {stay} AS stay_id FROM {table} AS e WHERE {key_col} IN ({values})")
    return " UNION ALL ".join(parts)


def reference_cohort_sql(fixture: Fixture, criteria: CohortCriteria, spec: FeatureFormatSpec) -> str:
    """A correct SQLite extraction query for the fixture and request."""
    x = _STAY_EXPRS[fixture.style]
    ctes = [
        "base AS (SELECT "
        f"{x.stay} AS stay_id, {x.patient} AS patient_id, {x.gender} AS gender, {x.age} AS age, "
        f"{x.los_hours} AS los_hours, {x.los_minutes} AS los_minutes, {x.mortality} AS mortality, "
        f"{x.missing_discharge} AS missing_discharge, {x.missing_gender} AS missing_gender, "
        f"ROW_NUMBER() OVER (PARTITION BY {x.patient} ORDER BY {x.order}) AS stay_rank, "
        f"COUNT(*) OVER (PARTITION BY {x.patient}) AS stay_count "
        f"FROM {x.source})"
    ]
    where = []
    join = ""
    if criteria.exclude_multiple_icu_stays:
        where.append("b.stay_count = 1" if criteria.multiple_stay_mode is MultipleStayMode.EXCLUDE_ALL
                     else "b.stay_rank = 1")
    if criteria.age_range:
        where.append(f"b.age BETWEEN {int(criteria.age_range[0])} AND {int(criteria.age_range[1])}")
    if criteria.gender_filter is GenderFilter.BOTH:
        where.append("b.gender IN ('Male', 'Female')")
    elif criteria.gender_filter is not None:
        where.append(f"b.gender = '{criteria.gender_filter.value}'")
    if criteria.exclude_missing_discharge:
        where.append("NOT b.missing_discharge")
    if criteria.min_stay_hours is not None:
        where.append(f"b.los_minutes >= {criteria.min_stay_hours * 60:g}")
    if criteria.exclude_missing_gender:
        where.append("NOT b.missing_gender")
    if criteria.min_clinical_records:
        rec = criteria.min_clinical_records
        ctes.append(f"records AS (SELECT stay_id, COUNT(*) AS n FROM ({_record_rows_sql(fixture, rec.codes)}) "
                    "GROUP BY stay_id)")
        join = " JOIN records AS r ON r.stay_id = b.stay_id"
        where.append(f"r.n >= {int(rec.min_count)}")
    column_of = {
        FeatureKind.IDENTIFIER: "b.stay_id", FeatureKind.GENDER: "b.gender", FeatureKind.INTEGER: "b.age",
        FeatureKind.FLOAT4: "b.los_hours", FeatureKind.MORTALITY: "b.mortality",
    }
    select = ", ".join(f"{column_of[f.kind]} AS {quote_alias(f.name)}" for f in spec.features)
    sql = f"WITH {', '.join(ctes)} SELECT {select} FROM base AS b{join}"
    if where:
        sql += " WHERE " + " AND ".join(where)
    return sql + " ORDER BY b.stay_id"


# -- event-stream reference SQL ------------------------------------------------


def reference_event_sql(fixture: Fixture, items: list[str], feature: str) -> str | None:
    """Timestamped events for the item keys, as (stay_id, timestamp_offset, event_type, value).

    Returns None when none of the items carries time information.
    """
    by_table: dict[str, list[str]] = {}
    parts = []
    label = sql_literal(feature) if not feature.isdigit() else f"'{feature}'"
    for key in items:
        item = fixture.item(key)
        if item.group == "columns":
            table, column = key.split(".")
            stay, _, time_expr, _, _ = _EVENT_SOURCES[table]
            if time_expr is None:
                continue
            parts.append(
                f"SELECT {stay} AS stay_id, {time_expr} AS timestamp_offset, {label} AS event_type, "
                f"e.{column} AS value FROM {table} AS e "
                f"WHERE e.{column} IS NOT NULL AND {time_expr} IS NOT NULL"
            )
        else:
            by_table.setdefault(item.table, []).append(key)
    for table, keys in by_table.items():
        stay, key_col, time_expr, value_expr, join = _EVENT_SOURCES[table]
        values = ", ".join(sql_literal(k) for k in keys)
        time_check = "e.charttime IS NOT NULL" if join else f"{time_expr} IS NOT NULL"
        parts.append(
            f"SELECT {stay} AS stay_id, {time_expr} AS timestamp_offset, {label} AS event_type, "
            f"{value_expr} AS value FROM {table} AS e {join} "
            f"WHERE {key_col} IN ({values}) AND {time_check}"
        )
    return " UNION ALL ".join(parts) if parts else None


# -- prompt reading helpers ------------------------------------------------------


def prompt_field(prompt: str, label: str, colon: bool = True) -> str:
    """Text after the last ``[label]:`` (or ``[label] ``) up to the next bracketed line."""
    marker = f"[{label}]:" if colon else f"[{label}]"
    at = prompt.rfind(marker)
    if at < 0:
        return ""
    rest = prompt[at + len(marker):]
    m = re.search(r"\n\[[A-Za-z]", rest)
    return (rest[:m.start()] if m else rest).strip()


def _tagged(tag: str, body: str) -> str:
    return f"<{tag}>\n{body}\n</{tag}>"


def _think(text: str) -> str:
    return _tagged("think", text)


# -- schema linking answers ------------------------------------------------------


def _table_line(label: str, schema: str, table: str, columns: list[str]) -> str:
    return f"{label}: {schema}.{table} , Columns: {', '.join(columns)}"


_CFSA_MAPPING = {
    Style.MIMIC_LIKE: [("d_items", ["itemid", "label", "unitname"]),
                       ("d_labitems", ["itemid", "label", "fluid"])],
    Style.EICU_LIKE: [("patient", ["gender", "age", "hospitaldischargestatus"])],
    Style.SIC_LIKE: [("d_references", ["referenceglobalid", "referencevalue", "referencename"])],
}

_CFSA_FEATURE = {
    Style.MIMIC_LIKE: [("icustays", ["icustay_id", "subject_id", "hadm_id", "intime", "outtime"]),
                       ("patients", ["subject_id", "gender", "dob"]),
                       ("admissions", ["hadm_id", "hospital_expire_flag"]),
                       ("labevents", ["icustay_id", "itemid", "charttime"])],
    Style.EICU_LIKE: [("patient", ["patientunitstayid", "uniquepid", "gender", "age", "unitdischargeoffset",
                                   "hospitaldischargestatus", "unitvisitnumber"]),
                      ("lab", ["patientunitstayid", "labname", "labresultoffset"])],
    Style.SIC_LIKE: [("cases", ["caseid", "patientid", "sex", "ageonadmission", "timeofstay", "dischargestate"]),
                     ("laboratory", ["caseid", "laboratoryid", "offset"])],
}

_CFSA_GUIDE = {
    Style.MIMIC_LIKE: (
        "Each icustays row is one ICU stay identified by icustay_id; patients holds gender and dob and "
        "admissions holds hospital_expire_flag. Age is the whole number of years between dob and intime. "
        "Length of stay is outtime minus intime in hours. Laboratory rows in labevents name their test "
        "through itemid, defined in d_labitems. The coded gender and mortality values still need checking."
    ),
    Style.EICU_LIKE: (
        "Each patient row is one ICU stay identified by patientunitstayid and grouped by uniquepid. "
        "Age is stored as text and unitdischargeoffset counts minutes from unit admission to discharge. "
        "Lab rows are identified by their labname text. The exact text used for gender, old ages and "
        "discharge status still needs checking."
    ),
    Style.SIC_LIKE: (
        "Each cases row is one ICU stay identified by caseid. Sex and dischargestate hold integer codes "
        "explained in d_references. timeofstay is the stay length in seconds and laboratory rows point "
        "to d_references through laboratoryid. The code meanings still need checking."
    ),
}

_CFSA_PROBES = {
    Style.MIMIC_LIKE: ["SELECT DISTINCT gender FROM patients",
                       "SELECT DISTINCT hospital_expire_flag FROM admissions"],
    Style.EICU_LIKE: ["SELECT DISTINCT gender FROM patient",
                      "SELECT DISTINCT age FROM patient WHERE age NOT GLOB '[0-9]*'",
                      "SELECT DISTINCT hospitaldischargestatus FROM patient"],
    Style.SIC_LIKE: ["SELECT DISTINCT sex FROM cases",
                     "SELECT referenceglobalid, referencevalue FROM d_references "
                     "WHERE referenceglobalid IN (23, 24, 2202, 2215)"],
}

_GLUCOSE_PROBE = {
    Style.MIMIC_LIKE: "SELECT itemid, label FROM d_labitems WHERE label LIKE '%lucose%'",
    Style.EICU_LIKE: "SELECT DISTINCT labname FROM lab WHERE labname LIKE '%glucose%'",
    Style.SIC_LIKE: "SELECT referenceglobalid, referencevalue FROM d_references WHERE referencevalue LIKE 'Glukose%'",
}

_CMA_DEFINITION = {
    Style.MIMIC_LIKE: [("d_items", ["itemid", "label", "unitname"]), ("d_labitems", ["itemid", "label"])],
    Style.EICU_LIKE: [("lab", ["labname", "labmeasurenamesystem"]),
                      ("nursecharting", ["nursingchartcelltypevalname"])],
    Style.SIC_LIKE: [("d_references", ["referenceglobalid", "referencevalue", "referenceunit"])],
}

_CMA_LIST_SQL = {
    Style.MIMIC_LIKE: ("SELECT DISTINCT d.itemid, d.label, d.unitname FROM d_items AS d UNION "
                       "SELECT DISTINCT l.itemid, l.label, e.valueuom FROM d_labitems AS l "
                       "LEFT JOIN labevents AS e ON e.itemid = l.itemid"),
    Style.EICU_LIKE: ("SELECT DISTINCT l.labname, l.labmeasurenamesystem FROM lab AS l UNION "
                      "SELECT DISTINCT n.nursingchartcelltypevalname, NULL FROM nursecharting AS n"),
    Style.SIC_LIKE: ("SELECT DISTINCT r.referenceglobalid, r.referencevalue, r.referenceunit "
                     "FROM d_references AS r"),
}

_CMA_GUIDE = {
    Style.MIMIC_LIKE: "Items are identified by itemid; label gives the item name and unitname its unit. "
                      "Measurements sit in chartevents and labevents keyed by itemid.",
    Style.EICU_LIKE: "Common vital signs are separate columns of vitalperiodic. Other vitals are rows of "
                     "nursecharting named by nursingchartcelltypevalname and labs are rows of lab named by labname.",
    Style.SIC_LIKE: "All codes live in d_references: referenceglobalid is the code and referencevalue its name. "
                    "Measurements sit in data_float_h (dataid) and laboratory (laboratoryid).",
}


def _words(text: str) -> set[str]:
    return {w for w in re.findall(r"[a-z]+", text.lower()) if len(w) >= 4}


class ReferenceResponder:
    """Prompt-driven stand-in for a model that understands the fixture."""

    def __init__(self, fixture: Fixture, scenarios: list[RequestScenario] | None = None):
        self.fixture = fixture
        self.schema = fixture.schema_name
        self.scenarios = scenarios if scenarios is not None else standard_scenarios(fixture)
        self._concept = {it.key: it.concept for it in fixture.items}
        self._handlers: dict[str, Callable[[str], str]] = {
            "cfsa_schema_linking_mapping": self.cfsa_link_mapping,
            "cfsa_schema_linking_feature": self.cfsa_link_feature,
            "cfsa_sql_sufficiency": self.cfsa_sufficiency,
            "cfsa_data_sufficiency": self.cfsa_data_sufficiency,
            "cfsa_update_schema": self.cfsa_update,
            "cfsa_sql_generation": self.cfsa_generate,
            "cfsa_error_feedback": self.cfsa_error_class,
            "cma_schema_linking_mapping": self.cma_link_mapping,
            "cma_schema_linking_feature": self.cma_link_feature,
            "cma_feature_locating": self.cma_locate,
            "cma_candidate_listing": self.cma_list,
            "cma_matching_first": lambda p: self.cma_match(p, second=False),
            "cma_matching_second": lambda p: self.cma_match(p, second=True),
            "integration": self.integrate,
        }

    def __call__(self, request: CompletionRequest) -> str:
        try:
            handler = self._handlers[request.template_id]
        except KeyError:
            raise ValueError(f"no scripted answer for template {request.template_id!r}") from None
        return handler(request.prompt_text)

    # -- cohort agent ------------------------------------------------------

    def scenario_for(self, prompt: str) -> RequestScenario:
        hits = [s for s in self.scenarios if s.criteria.describe() in prompt]
        if not hits:
            raise ValueError("prompt does not contain any known cohort request")
        return max(hits, key=lambda s: len(s.criteria.describe()))

    def _needs_records(self, prompt: str) -> bool:
        return self.scenario_for(prompt).criteria.min_clinical_records is not None

    def _cfsa_mapping_lines(self) -> list[str]:
        return [_table_line("Mapping Table", self.schema, t, c) for t, c in _CFSA_MAPPING[self.fixture.style]]

    def _cfsa_feature_lines(self, records: bool) -> list[str]:
        tables = _CFSA_FEATURE[self.fixture.style]
        if not records:
            tables = tables[:-1]
        return [_table_line("Table Name", self.schema, t, c) for t, c in tables]

    def cfsa_link_mapping(self, prompt: str) -> str:
        lines = self._cfsa_mapping_lines()
        return "\n".join(lines) + "\n[Schema Guideline]: These tables translate stored codes into readable names."

    def cfsa_link_feature(self, prompt: str) -> str:
        lines = self._cfsa_feature_lines(self._needs_records(prompt))
        return "\n".join(lines) + f"\n[Schema Guideline]: {_CFSA_GUIDE[self.fixture.style]}"

    def cfsa_probes(self, prompt: str) -> list[str]:
        probes = list(_CFSA_PROBES[self.fixture.style])
        if self._needs_records(prompt):
            probes.append(_GLUCOSE_PROBE[self.fixture.style])
        return probes

    def cfsa_sufficiency(self, prompt: str) -> str:
        if prompt_field(prompt, "Previous Observation") in ("", "None"):
            return (_think("The coded values have not been observed yet.") + "\n"
                    + _tagged("output", "<need more information>") + "\n"
                    + _tagged("SQL queries", " || ".join(self.cfsa_probes(prompt))))
        return _think("The observed values resolve every open point.") + "\n" + _tagged("output", "<correct>")

    def cfsa_data_sufficiency(self, prompt: str) -> str:
        observed = prompt_field(prompt, "SQL Observation")
        if not observed or observed == "{}":
            return _think("Nothing was returned.") + "\n" + _tagged("output", "<No info>")
        return (_think("The probes show the stored codes.") + "\n" + _tagged("output", "<Add info>") + "\n"
                + _tagged("Add info", f"Observed query results: {observed}"))

    def cfsa_update(self, prompt: str) -> str:
        guideline = prompt_field(prompt, "Schema Guideline")
        extra = prompt_field(prompt, "Additional Information")
        lines = self._cfsa_mapping_lines() + self._cfsa_feature_lines(self._needs_records(prompt))
        return (_think("Fold the observed values into the guideline.") + "\n"
                + _tagged("edited schema guideline", f"{guideline} {extra}".strip()) + "\n"
                + _tagged("edited schema", "\n".join(lines)))

    def cfsa_generate(self, prompt: str) -> str:
        s = self.scenario_for(prompt)
        sql = reference_cohort_sql(self.fixture, s.criteria, s.spec)
        return _think("Apply every criterion on one row per stay.") + "\n" + _tagged("SQL query", sql)

    def cfsa_error_class(self, prompt: str) -> str:
        feedback = prompt_field(prompt, "Error Feedback").lower()
        label = "<syntax error>" if "syntax error" in feedback or "incomplete input" in feedback else "<wrong schema>"
        return _think("Classify by the database message.") + "\n" + _tagged("error class", label)

    # -- code mapping agent ------------------------------------------------

    def cma_link_mapping(self, prompt: str) -> str:
        lines = [_table_line("Mapping Table", self.schema, t, c) for t, c in _CMA_DEFINITION[self.fixture.style]]
        return "\n".join(lines) + f"\n[Schema Guideline]: {_CMA_GUIDE[self.fixture.style]}"

    def cma_link_feature(self, prompt: str) -> str:
        lines = [_table_line("Table Name", self.schema, t.name, t.column_names)
                 for t in self.fixture.tables.values()]
        return (_tagged("selected schema", "\n".join(lines)) + "\n"
                + _tagged("schema guideline", _CMA_GUIDE[self.fixture.style]))

    def cma_locate(self, prompt: str) -> str:
        feature = prompt_field(prompt, "Feature")
        target = normalize_literal(feature)
        try:
            linked = parse_linked_tables(prompt_field(prompt, "Selected Schema"))
        except MalformedResponse:
            linked = None
        hits = []
        for t in (linked.tables if linked else ()):
            for c in t.column_names():
                col = normalize_literal(c)
                if col == target or target in col or (len(col) >= 4 and col in target):
                    hits.append(f"{t.qualified}.{c}")
        body = " || ".join(hits) if hits else "None"
        return _think("Compare the feature with every column name literally.") + "\n" + _tagged("feature column", body)

    def cma_list(self, prompt: str) -> str:
        return _think("List every defined item once.") + "\n" + _tagged("SQL queries", _CMA_LIST_SQL[self.fixture.style])

    def _score(self, feature: str, cand: CandidateTuple, second: bool) -> int:
        key = cand.code if cand.code is not None else cand.name
        concept = self._concept.get(key)
        if concept == feature:
            return 97 if second else 95
        if _words(cand.name) & _words(feature):
            return 55 if second else 82
        return 5

    def cma_match(self, prompt: str, second: bool) -> str:
        feature = prompt_field(prompt, "Target Feature" if second else "Targeting Feature")
        threshold = int(prompt_field(prompt, "Threshold"))
        raw = ast.literal_eval(prompt_field(prompt, "Candidate Features"))
        pairs = []
        for values in raw:
            cand = CandidateTuple.from_values(tuple(values))
            score = self._score(feature, cand, second)
            if score >= threshold:
                pairs.append(f"{cand.literal()}: {score}")
        return f"{feature}: {{" + " || ".join(pairs) + "}"

    # -- event-stream integration ----------------------------------------

    def integrate(self, prompt: str) -> str:
        feature = re.search(r"Timeseries result about (.+?) is '", prompt).group(1)
        stay_col = re.search(r'stay identifier column "((?:[^"]|"")+)"', prompt).group(1)
        codes = json.loads(prompt_field(prompt, "Selected mapping codes", colon=False))
        items = [c[0] if isinstance(c, list) else c for c in codes]
        lo, hi = map(int, re.search(r"(-?\d+) to (-?\d+) minutes", prompt_field(
            prompt, "Target time range", colon=False)).groups())
        cohort = prompt_field(prompt, "CFSA Generated SQL", colon=False)
        events = reference_event_sql(self.fixture, items, feature)
        if events is None:
            events = ("SELECT NULL AS stay_id, NULL AS timestamp_offset, NULL AS event_type, "
                      "NULL AS value WHERE 0 = 1")
        sql = (f"WITH cohort AS ({cohort}), ids AS (SELECT {quote_alias(stay_col)} AS stay_id FROM cohort), "
               f"events AS ({events}) "
               "SELECT ev.stay_id, ev.timestamp_offset, ev.event_type, ev.value FROM events AS ev "
               f"WHERE ev.timestamp_offset BETWEEN {lo} AND {hi} AND ev.stay_id IN (SELECT stay_id FROM ids) "
               "ORDER BY ev.stay_id, ev.timestamp_offset, ev.value")
        return _think("Filter events early, then restrict to the cohort.") + "\n" + _tagged("sql_query", sql)


# -- adversarial responders --------------------------------------------------------

ADVERSARY_MODES = (
    "over_budget",          # always lists 7 probes and is never satisfied
    "perpetual",            # never satisfied, repeats an earlier probe every round
    "repeated_failure",     # every generated query fails to execute
    "syntax_then_fix",      # first query has a syntax error, then the reference query
    "wrong_schema_then_fix",  # first query returns the wrong column count
    "unknown_table_then_fix",  # first query names a missing table, classified as wrong schema
    "malformed",            # first sufficiency and first generation answers are garbled
)


class AdversaryResponder:
    """Reference answers with one scripted misbehaviour; stateful by design."""

    def __init__(self, reference: ReferenceResponder, mode: str):
        if mode not in ADVERSARY_MODES:
            raise ValueError(f"unknown adversary mode {mode!r}; expected one of {ADVERSARY_MODES}")
        self.reference = reference
        self.mode = mode
        self.counts: dict[str, int] = {}

    def _next(self, template_id: str) -> int:
        self.counts[template_id] = self.counts.get(template_id, 0) + 1
        return self.counts[template_id]

    def __call__(self, request: CompletionRequest) -> str:
        n = self._next(request.template_id)
        tid, prompt = request.template_id, request.prompt_text
        mode = self.mode
        if tid == "cfsa_sql_sufficiency":
            if mode == "over_budget":
                probes = [f"SELECT {n * 10 + i} AS probe" for i in range(7)]
                return _tagged("output", "<need more information>") + "\n" + _tagged("SQL queries", " || ".join(probes))
            if mode == "perpetual":
                probes = [f"SELECT {n} AS probe"]
                if n > 1:
                    probes.append(f"SELECT {n - 1} AS probe")
                return _tagged("output", "<need more information>") + "\n" + _tagged("SQL queries", " || ".join(probes))
            if mode == "malformed" and n == 1:
                return "I think the schema is fine but I am not sure."
        if tid == "cfsa_sql_generation":
            scenario = self.reference.scenario_for(prompt)
            good = reference_cohort_sql(self.reference.fixture, scenario.criteria, scenario.spec)
            if mode == "repeated_failure":
                bad = "SELECT stay FROM missing_table_{0}".format(n) if n % 2 else "SELEC * FRM cases"
                return _tagged("SQL query", bad)
            if mode == "syntax_then_fix" and n == 1:
                return _tagged("SQL query", "SELEC stay_id FRM base")
            if mode == "wrong_schema_then_fix" and n == 1:
                return _tagged("SQL query", f"SELECT * FROM ({good}) AS t, (SELECT 1 AS extra)")
            if mode == "unknown_table_then_fix" and n == 1:
                return _tagged("SQL query", "SELECT stay_id FROM stays_table_that_does_not_exist")
            if mode == "malformed" and n == 1:
                return "Here is the query: SELECT 1"
        if tid == "cfsa_error_feedback" and mode == "repeated_failure":
            # alternate so both routes are taken
            label = "<syntax error>" if n % 2 else "<wrong schema>"
            return _tagged("error class", label)
        return self.reference(request)


CMA_ADVERSARY_MODES = ("list_fail_once", "list_always_fail", "malformed_match")


class CmaAdversaryResponder:
    """Reference mapping answers with scripted candidate-listing or scoring faults."""

    def __init__(self, reference: ReferenceResponder, mode: str):
        if mode not in CMA_ADVERSARY_MODES:
            raise ValueError(f"unknown mapping adversary mode {mode!r}")
        self.reference = reference
        self.mode = mode
        self.counts: dict[str, int] = {}

    def __call__(self, request: CompletionRequest) -> str:
        tid = request.template_id
        self.counts[tid] = n = self.counts.get(tid, 0) + 1
        if tid == "cma_candidate_listing":
            if self.mode == "list_always_fail" or (self.mode == "list_fail_once" and n == 1):
                return _tagged("SQL queries", "SELECT DISTINCT code, name, unit FROM definitions_missing")
        if tid == "cma_matching_first" and self.mode == "malformed_match" and n == 1:
            return "All candidates look similar to me."
        return self.reference(request)
