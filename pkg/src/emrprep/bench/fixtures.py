"""Deterministic synthetic EMR databases in three storage styles.

Every fixture is generated from one canonical population (stays plus
timestamped measurement events) and then rendered into a style-specific
relational layout. The canonical records double as the brute-force ground
truth, so the gold never depends on SQL.
"""

from __future__ import annotations

import csv
import io
import json
import shutil
import sqlite3
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from importlib import resources
from pathlib import Path

import numpy as np

from ..mapping import MappingGold, MappingResult, Outcome, save_mapping
from ..templates import DocumentBundle
from .catalog import (
    CONCEPTS,
    FEATURE_LIST,
    SIC_DISCHARGE_CODES,
    SIC_SEX_CODES,
    STYLE_ITEMS,
    Item,
    Style,
)

EPOCH = datetime(2100, 1, 1)
MIN_SCALE = 50
DEFAULT_SCALE = 200
MINUTES_PER_YEAR = 365.25 * 1440

SCHEMA_NAMES = {Style.MIMIC_LIKE: "mimic", Style.EICU_LIKE: "eicu", Style.SIC_LIKE: "sicdb"}


@dataclass(frozen=True)
class StayRecord:
    stay_id: int
    patient_id: str
    gender: str | None
    age: int
    intime: int  # minutes after EPOCH
    los_minutes: int | None
    mortality: str | None
    weight: float | None = None

    @property
    def los_hours(self) -> float | None:
        return None if self.los_minutes is None else round(self.los_minutes / 60, 4)


@dataclass(frozen=True)
class EventRecord:
    stay_id: int
    key: str
    offset: int | None  # minutes from ICU admission; None = no time information
    value: float


@dataclass(frozen=True)
class TableData:
    name: str
    columns: tuple[tuple[str, str], ...]
    rows: tuple[tuple, ...]
    primary_key: str
    foreign_keys: tuple[tuple[str, str, str], ...] = ()

    @property
    def column_names(self) -> list[str]:
        return [c for c, _ in self.columns]

    def ddl(self) -> str:
        parts = [f"  {c} {t}" for c, t in self.columns]
        parts.append(f"  PRIMARY KEY ({self.primary_key})")
        parts += [f"  FOREIGN KEY ({c}) REFERENCES {t} ({r})" for c, t, r in self.foreign_keys]
        return f"CREATE TABLE {self.name} (\n" + ",\n".join(parts) + "\n);"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, quoting=csv.QUOTE_NONNUMERIC, lineterminator="\n")
        writer.writerow(self.column_names)
        writer.writerows(self.rows)
        return buf.getvalue()


@dataclass(frozen=True)
class StyleLayout:
    """Names the agents and evaluators need to talk about a style."""

    stay_table: str
    stay_column: str
    patient_column: str


LAYOUTS = {
    Style.MIMIC_LIKE: StyleLayout("icustays", "icustay_id", "subject_id"),
    Style.EICU_LIKE: StyleLayout("patient", "patientunitstayid", "uniquepid"),
    Style.SIC_LIKE: StyleLayout("cases", "caseid", "patientid"),
}


@dataclass
class Fixture:
    style: Style
    seed: int
    scale: int
    stays: tuple[StayRecord, ...]
    events: tuple[EventRecord, ...]
    tables: dict[str, TableData]
    documents: DocumentBundle
    items: tuple[Item, ...] = field(default_factory=tuple)

    @property
    def schema_name(self) -> str:
        return SCHEMA_NAMES[self.style]

    @property
    def layout(self) -> StyleLayout:
        return LAYOUTS[self.style]

    def item(self, key: str) -> Item:
        for it in self.items:
            if it.key == key:
                return it
        raise KeyError(f"{key!r} is not an item of the {self.style.value} fixture")

    def ddl(self) -> str:
        return "\n\n".join(t.ddl() for t in self.tables.values()) + "\n"

    def mapping_gold(self) -> MappingGold:
        return MappingGold(
            {f: gold_mapping_for(self.items, f) for f in FEATURE_LIST},
            frozenset(it.key if "." not in it.key else it.key.lower() for it in self.items),
        )

    def create_database(self, path: Path) -> None:
        if path.exists():
            path.unlink()
        conn = sqlite3.connect(path)
        try:
            conn.executescript(self.ddl())
            for t in self.tables.values():
                marks = ", ".join("?" * len(t.columns))
                conn.executemany(f"INSERT INTO {t.name} VALUES ({marks})", t.rows)
            conn.commit()
        finally:
            conn.close()

    def write(self, target: str | Path, overwrite: bool = False) -> "FixturePaths":
        """Write DDL, CSVs, the agent-visible database, gold files and documents.

        Gold files go to ``gold/``, never into the database the agents open.
        """
        target = Path(target)
        if target.exists() and any(target.iterdir()):
            if not overwrite:
                raise FileExistsError(f"{target} is not empty; pass overwrite to replace it")
            shutil.rmtree(target)
        paths = FixturePaths(target, self.schema_name)
        for d in (paths.data_dir, paths.gold_dir, paths.docs_dir):
            d.mkdir(parents=True, exist_ok=True)
        paths.ddl.write_text(self.ddl(), encoding="utf-8")
        for t in self.tables.values():
            (paths.data_dir / f"{t.name}.csv").write_text(t.to_csv(), encoding="utf-8")
        self.create_database(paths.database)
        paths.gold_stays.write_text(stays_to_csv(self.stays), encoding="utf-8")
        paths.gold_events.write_text(events_to_csv(self.events), encoding="utf-8")
        save_mapping(self.mapping_gold().features.values(), paths.gold_mapping)
        paths.manual.write_text(self.documents.database_manual, encoding="utf-8")
        paths.memo.write_text(self.documents.evaluation_memo, encoding="utf-8")
        paths.meta.write_text(
            json.dumps({"style": self.style.value, "seed": self.seed, "scale": self.scale,
                        "schema": self.schema_name}, indent=2) + "\n",
            encoding="utf-8",
        )
        return paths


@dataclass(frozen=True)
class FixturePaths:
    root: Path
    schema_name: str

    @property
    def database(self) -> Path:
        return self.root / f"{self.schema_name}.sqlite"

    @property
    def ddl(self) -> Path:
        return self.root / "schema.sql"

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def gold_dir(self) -> Path:
        return self.root / "gold"

    @property
    def docs_dir(self) -> Path:
        return self.root / "docs"

    @property
    def gold_stays(self) -> Path:
        return self.gold_dir / "stays.csv"

    @property
    def gold_events(self) -> Path:
        return self.gold_dir / "events.csv"

    @property
    def gold_mapping(self) -> Path:
        return self.gold_dir / "mapping.json"

    @property
    def manual(self) -> Path:
        return self.docs_dir / "manual.txt"

    @property
    def memo(self) -> Path:
        return self.docs_dir / "memo.txt"

    @property
    def meta(self) -> Path:
        return self.root / "fixture.json"


def load_fixture(root: str | Path) -> Fixture:
    """Rebuild the fixture recorded in ``root/fixture.json``."""
    meta = json.loads((Path(root) / "fixture.json").read_text(encoding="utf-8"))
    return build_fixture(Style(meta["style"]), int(meta["seed"]), int(meta["scale"]))


def stays_to_csv(stays) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stay_id", "patient_id", "gender", "age", "intime", "los_minutes", "mortality", "weight"])
    for s in stays:
        w.writerow([s.stay_id, s.patient_id, s.gender or "", s.age, s.intime,
                    "" if s.los_minutes is None else s.los_minutes, s.mortality or "",
                    "" if s.weight is None else s.weight])
    return buf.getvalue()


def events_to_csv(events) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stay_id", "key", "offset", "value"])
    for e in events:
        w.writerow([e.stay_id, e.key, "" if e.offset is None else e.offset, e.value])
    return buf.getvalue()


def gold_mapping_for(items, feature: str) -> MappingResult:
    hits = [it for it in items if it.concept == feature]
    if not hits:
        return MappingResult.absent(feature)
    if all(it.group == "columns" for it in hits):
        return MappingResult(feature, Outcome.COLUMN_REFS, refs=tuple(it.key for it in hits))
    if all(it.group in ("d_items", "d_labitems", "d_references") for it in hits):
        return MappingResult(feature, Outcome.ROW_CODES, codes=tuple((it.key, it.label) for it in hits))
    if all(it.group in ("lab", "nursecharting") for it in hits):
        return MappingResult(feature, Outcome.NAMES_ONLY, names=tuple(it.key for it in hits))
    raise ValueError(f"feature {feature!r} mixes storage patterns")


def bundled_documents(style: Style) -> DocumentBundle:
    base = resources.files("emrprep.bench") / "docs"
    stem = style.value.lower()
    return DocumentBundle(
        (base / f"{stem}_manual.txt").read_text(encoding="utf-8"),
        (base / f"{stem}_memo.txt").read_text(encoding="utf-8"),
    )


# -- canonical population ------------------------------------------------------


def _population(rng: np.random.Generator, scale: int, style: Style) -> list[StayRecord]:
    raw = []
    for p in range(scale):
        n_stays = int(rng.choice([1, 2, 3], p=[0.82, 0.14, 0.04]))
        g = rng.random()
        gender = "Male" if g < 0.55 else ("Female" if g < 0.97 else None)
        age = int(rng.integers(16, 96))
        if style is Style.EICU_LIKE:
            age = min(age, 90)
        first = int(rng.integers(0, 3 * 365 * 1440))
        # keep every stay well inside one year of age: 20-150 days after a birthday
        elapsed = 0
        for k in range(n_stays):
            intime = first + elapsed
            elapsed += int(rng.integers(3, 60)) * 1440
            los = int(np.clip(np.exp(rng.normal(np.log(2500), 0.8)), 60, 30 * 1440))
            if rng.random() < 0.06:
                los = None
            m = rng.random()
            mortality = "Dead" if m < 0.12 else ("Alive" if m < 0.96 else None)
            weight = None if rng.random() < 0.08 else round(float(rng.uniform(45, 130)), 1)
            raw.append((intime, p, gender, age, los, mortality, weight, k))
    raw.sort(key=lambda r: (r[0], r[1], r[7]))
    base = {Style.MIMIC_LIKE: 200001, Style.EICU_LIKE: 141001, Style.SIC_LIKE: 1001}[style]
    stays = []
    for i, (intime, p, gender, age, los, mortality, weight, _) in enumerate(raw):
        stays.append(StayRecord(base + i, _patient_id(style, p), gender, age, intime, los, mortality, weight))
    return stays


def _patient_id(style: Style, p: int) -> str:
    if style is Style.EICU_LIKE:
        return f"002-{10000 + p * 7:05d}"
    if style is Style.MIMIC_LIKE:
        return str(10001 + p)
    return str(5001 + p)


def _value(rng: np.random.Generator, concept: str | None) -> float:
    lo, hi = CONCEPTS.get(concept, (0.0, 100.0)) if concept else (0.0, 100.0)
    return round(float(rng.uniform(lo, hi)), 2)


def _offset(rng: np.random.Generator, stay: StayRecord) -> int | None:
    if rng.random() < 0.02:
        return None
    end = stay.los_minutes if stay.los_minutes is not None else 4 * 1440
    return int(rng.integers(-60, end + 1))


def _row_events(rng, stays, items) -> list[EventRecord]:
    events = []
    for s in stays:
        for it in items:
            if it.rate <= 0 or it.group == "columns":
                continue
            for _ in range(int(rng.poisson(it.rate))):
                events.append(EventRecord(s.stay_id, it.key, _offset(rng, s), _value(rng, it.concept)))
    return events


# -- style renderers -------------------------------------------------------------


def _ts(minutes: int | None) -> str | None:
    if minutes is None:
        return None
    return (EPOCH + timedelta(minutes=int(minutes))).strftime("%Y-%m-%d %H:%M:%S")


def _render_mimic(rng, stays, items):
    events = _row_events(rng, stays, items)
    by_id = {s.stay_id: s for s in stays}
    patients, seen = [], {}
    for s in stays:
        if s.patient_id in seen:
            continue
        # birthday 20-150 days before the first stay keeps the age fraction far from 0 and 1
        slack = int(rng.integers(20, 150)) * 1440
        dob = s.intime - int(round(s.age * MINUTES_PER_YEAR)) - slack
        seen[s.patient_id] = dob
        g = {"Male": "M", "Female": "F"}.get(s.gender)
        patients.append((int(s.patient_id), g, _ts(dob)))
    admissions, icustays = [], []
    for i, s in enumerate(stays):
        hadm = 100001 + i
        admit = s.intime - int(rng.integers(0, 2880))
        out = None if s.los_minutes is None else s.intime + s.los_minutes
        disch = (out if out is not None else s.intime + 5 * 1440) + int(rng.integers(60, 4320))
        flag = {"Dead": 1, "Alive": 0}.get(s.mortality)
        admissions.append((hadm, int(s.patient_id), _ts(admit), _ts(disch), flag))
        unit = ["MICU", "SICU", "CCU", "TSICU", "CSRU"][int(rng.integers(0, 5))]
        icustays.append((s.stay_id, int(s.patient_id), hadm, unit, _ts(s.intime), _ts(out)))
    hadm_of = {r[0]: r[2] for r in icustays}
    chart, lab = [], []
    units = {it.key: it.unit for it in items}
    table_of = {it.key: it.table for it in items}
    for e in events:
        s = by_id[e.stay_id]
        when = None if e.offset is None else _ts(s.intime + e.offset)
        target = chart if table_of[e.key] == "chartevents" else lab
        target.append([int(s.patient_id), hadm_of[s.stay_id], s.stay_id, int(e.key), when, e.value, units[e.key]])
    chart = tuple((i + 1, *r) for i, r in enumerate(chart))
    lab = tuple((i + 1, *r) for i, r in enumerate(lab))
    d_items = tuple(
        (int(it.key), it.label, it.unit, "Routine Vital Signs" if it.concept else "General", "chartevents")
        for it in items if it.group == "d_items"
    )
    d_labitems = tuple(
        (int(it.key), it.label, "Blood", "Chemistry" if it.concept else "Hematology")
        for it in items if it.group == "d_labitems"
    )
    ev_cols = (("row_id", "INTEGER"), ("subject_id", "INTEGER"), ("hadm_id", "INTEGER"),
               ("icustay_id", "INTEGER"), ("itemid", "INTEGER"), ("charttime", "TIMESTAMP"),
               ("valuenum", "REAL"), ("valueuom", "TEXT"))
    tables = [
        TableData("patients", (("subject_id", "INTEGER"), ("gender", "TEXT"), ("dob", "TIMESTAMP")),
                  tuple(patients), "subject_id"),
        TableData("admissions", (("hadm_id", "INTEGER"), ("subject_id", "INTEGER"),
                                 ("admittime", "TIMESTAMP"), ("dischtime", "TIMESTAMP"),
                                 ("hospital_expire_flag", "INTEGER")),
                  tuple(admissions), "hadm_id", (("subject_id", "patients", "subject_id"),)),
        TableData("icustays", (("icustay_id", "INTEGER"), ("subject_id", "INTEGER"), ("hadm_id", "INTEGER"),
                               ("first_careunit", "TEXT"), ("intime", "TIMESTAMP"), ("outtime", "TIMESTAMP")),
                  tuple(icustays), "icustay_id",
                  (("subject_id", "patients", "subject_id"), ("hadm_id", "admissions", "hadm_id"))),
        TableData("d_items", (("itemid", "INTEGER"), ("label", "TEXT"), ("unitname", "TEXT"),
                              ("category", "TEXT"), ("linksto", "TEXT")), d_items, "itemid"),
        TableData("chartevents", ev_cols, chart, "row_id",
                  (("icustay_id", "icustays", "icustay_id"), ("itemid", "d_items", "itemid"))),
        TableData("d_labitems", (("itemid", "INTEGER"), ("label", "TEXT"), ("fluid", "TEXT"),
                                 ("category", "TEXT")), d_labitems, "itemid"),
        TableData("labevents", ev_cols, lab, "row_id",
                  (("icustay_id", "icustays", "icustay_id"), ("itemid", "d_labitems", "itemid"))),
    ]
    return events, tables


def _render_eicu(rng, stays, items):
    events = _row_events(rng, stays, items)
    visit: dict[str, int] = {}
    patient = []
    for s in stays:
        visit[s.patient_id] = visit.get(s.patient_id, 0) + 1
        age = "> 89" if s.age >= 90 else str(s.age)
        status = {"Dead": "Expired", "Alive": "Alive"}.get(s.mortality)
        patient.append((s.stay_id, s.patient_id, s.gender or "", age, s.weight,
                        -int(rng.integers(0, 2880)), s.los_minutes, status, visit[s.patient_id]))
        if s.weight is not None:
            events.append(EventRecord(s.stay_id, "patient.weight", None, s.weight))
    vital_rows = []
    columns = [("heartrate", 0.95, "Heart rate"), ("temperature", 0.6, "Core body temperature"),
               ("st1", 0.5, None), ("etco2", 0.35, None)]
    for s in stays:
        for _ in range(int(rng.poisson(8))):
            off = _offset(rng, s)
            row = [s.stay_id, off]
            for col, p, concept in columns:
                if rng.random() < p:
                    v = _value(rng, concept)
                    row.append(v)
                    events.append(EventRecord(s.stay_id, f"vitalperiodic.{col}", off, v))
                else:
                    row.append(None)
            vital_rows.append(row)
    vital = tuple((i + 1, *r) for i, r in enumerate(vital_rows))
    units = {it.key: it.unit for it in items}
    table_of = {it.key: it.table for it in items}
    nurse, lab = [], []
    for e in events:
        if table_of.get(e.key) == "nursecharting":
            nurse.append([e.stay_id, e.offset, e.key, f"{e.value:g}"])
        elif table_of.get(e.key) == "lab":
            lab.append([e.stay_id, e.offset, e.key, e.value, units[e.key]])
    nurse = tuple((i + 1, *r) for i, r in enumerate(nurse))
    lab = tuple((i + 1, *r) for i, r in enumerate(lab))
    tables = [
        TableData("patient", (("patientunitstayid", "INTEGER"), ("uniquepid", "TEXT"), ("gender", "TEXT"),
                              ("age", "TEXT"), ("weight", "REAL"), ("hospitaladmitoffset", "INTEGER"),
                              ("unitdischargeoffset", "INTEGER"), ("hospitaldischargestatus", "TEXT"),
                              ("unitvisitnumber", "INTEGER")), tuple(patient), "patientunitstayid"),
        TableData("vitalperiodic", (("vitalperiodicid", "INTEGER"), ("patientunitstayid", "INTEGER"),
                                    ("observationoffset", "INTEGER"), ("heartrate", "REAL"),
                                    ("temperature", "REAL"), ("st1", "REAL"), ("etco2", "REAL")),
                  vital, "vitalperiodicid"),
        TableData("nursecharting", (("nursingchartid", "INTEGER"), ("patientunitstayid", "INTEGER"),
                                    ("nursingchartoffset", "INTEGER"), ("nursingchartcelltypevalname", "TEXT"),
                                    ("nursingchartvalue", "TEXT")), nurse, "nursingchartid"),
        TableData("lab", (("labid", "INTEGER"), ("patientunitstayid", "INTEGER"), ("labresultoffset", "INTEGER"),
                          ("labname", "TEXT"), ("labresult", "REAL"), ("labmeasurenamesystem", "TEXT")),
                  lab, "labid"),
    ]
    return events, tables


def _render_sic(rng, stays, items):
    events = _row_events(rng, stays, items)
    cases = []
    for s in stays:
        year = (EPOCH + timedelta(minutes=s.intime)).year
        cases.append((s.stay_id, int(s.patient_id), year, SIC_SEX_CODES.get(s.gender), s.age,
                      None if s.los_minutes is None else s.los_minutes * 60,
                      SIC_DISCHARGE_CODES.get(s.mortality), s.weight))
        if s.weight is not None:
            events.append(EventRecord(s.stay_id, "cases.bodyweight", None, s.weight))
    table_of = {it.key: it.table for it in items}
    lab, data = [], []
    for e in events:
        secs = None if e.offset is None else e.offset * 60
        if table_of.get(e.key) == "laboratory":
            lab.append([e.stay_id, int(e.key), secs, e.value])
        elif table_of.get(e.key) == "data_float_h":
            data.append([e.stay_id, int(e.key), secs, e.value])
    refs = tuple(
        (int(it.key), it.label, _reference_category(it), it.unit)
        for it in items if it.group == "d_references"
    )
    tables = [
        TableData("cases", (("caseid", "INTEGER"), ("patientid", "INTEGER"), ("admissionyear", "INTEGER"),
                            ("sex", "INTEGER"), ("ageonadmission", "INTEGER"), ("timeofstay", "INTEGER"),
                            ("dischargestate", "INTEGER"), ("bodyweight", "REAL")), tuple(cases), "caseid",
                  (("sex", "d_references", "referenceglobalid"),
                   ("dischargestate", "d_references", "referenceglobalid"))),
        TableData("d_references", (("referenceglobalid", "INTEGER"), ("referencevalue", "TEXT"),
                                   ("referencename", "TEXT"), ("referenceunit", "TEXT")), refs,
                  "referenceglobalid"),
        TableData("laboratory", (("id", "INTEGER"), ("caseid", "INTEGER"), ("laboratoryid", "INTEGER"),
                                 ("offset", "INTEGER"), ("laboratoryvalue", "REAL")),
                  tuple((i + 1, *r) for i, r in enumerate(lab)), "id",
                  (("caseid", "cases", "caseid"), ("laboratoryid", "d_references", "referenceglobalid"))),
        TableData("data_float_h", (("id", "INTEGER"), ("caseid", "INTEGER"), ("dataid", "INTEGER"),
                                   ("offset", "INTEGER"), ("val", "REAL")),
                  tuple((i + 1, *r) for i, r in enumerate(data)), "id",
                  (("caseid", "cases", "caseid"), ("dataid", "d_references", "referenceglobalid"))),
    ]
    return events, tables


def _reference_category(it: Item) -> str:
    if it.table == "laboratory":
        return "Laboratory"
    if it.table == "data_float_h":
        return "Vital signs"
    return "Sex" if int(it.key) in SIC_SEX_CODES.values() else "Discharge state"


_RENDERERS = {Style.MIMIC_LIKE: _render_mimic, Style.EICU_LIKE: _render_eicu, Style.SIC_LIKE: _render_sic}


def build_fixture(style: Style | str, seed: int = 7, scale: int = DEFAULT_SCALE) -> Fixture:
    """Generate a fixture; identical (style, seed, scale) give identical bundles."""
    style = Style.parse(style) if isinstance(style, str) else style
    if scale < MIN_SCALE:
        raise ValueError(f"scale must be >= {MIN_SCALE}, got {scale}")
    rng = np.random.default_rng([seed, list(Style).index(style)])
    items = STYLE_ITEMS[style]
    stays = _population(rng, scale, style)
    events, tables = _RENDERERS[style](rng, stays, items)
    events.sort(key=lambda e: (e.stay_id, e.offset is None, e.offset or 0, e.key, e.value))
    return Fixture(style, seed, scale, tuple(stays), tuple(events),
                   {t.name: t for t in tables}, bundled_documents(style), items)

