"""Cohort criteria and the brute-force gold cohort.

The gold is computed by filtering the fixture's canonical stay and event
records in memory; it never looks at SQL.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Any

import numpy as np

from ..formats import FeatureFormatSpec, FeatureKind
from .catalog import GLUCOSE_KEYS
from .fixtures import Fixture, StayRecord


class GenderFilter(str, enum.Enum):
    MALE = "Male"
    FEMALE = "Female"
    BOTH = "Both"


class MultipleStayMode(str, enum.Enum):
    EXCLUDE_ALL = "exclude-all"
    FIRST_STAY = "first-stay"


@dataclass(frozen=True)
class ClinicalRecordCriterion:
    """At least ``min_count`` event rows carrying the listed item keys.

    ``any-of`` pools the counts of all keys; ``single`` takes exactly one key.
    """

    codes: tuple[str, ...]
    min_count: int
    combinator: str = "any-of"
    label: str = "clinical"

    def __post_init__(self) -> None:
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")
        if self.combinator not in ("any-of", "single"):
            raise ValueError(f"unknown combinator {self.combinator!r}")
        if not self.codes or (self.combinator == "single" and len(self.codes) != 1):
            raise ValueError("'single' needs exactly one code and 'any-of' at least one")


@dataclass(frozen=True)
class CohortCriteria:
    age_range: tuple[int, int] | None = None
    gender_filter: GenderFilter | None = None
    exclude_missing_discharge: bool = False
    min_stay_hours: float | None = None
    exclude_multiple_icu_stays: bool = False
    exclude_missing_gender: bool = False
    min_clinical_records: ClinicalRecordCriterion | None = None
    multiple_stay_mode: MultipleStayMode = MultipleStayMode.EXCLUDE_ALL

    def __post_init__(self) -> None:
        if self.age_range is not None and self.age_range[0] > self.age_range[1]:
            raise ValueError("age range minimum exceeds maximum")
        if self.min_stay_hours is not None and self.min_stay_hours < 0:
            raise ValueError("min_stay_hours must be >= 0")

    def describe(self) -> str:
        """Natural-language cohort selection text for a request."""
        parts = []
        if self.age_range:
            parts.append(f"Include only patients aged {self.age_range[0]} to {self.age_range[1]} "
                         "(inclusive, whole years at ICU admission).")
        if self.gender_filter is GenderFilter.BOTH:
            parts.append("Include only Male and Female patients.")
        elif self.gender_filter:
            parts.append(f"Include only {self.gender_filter.value} patients.")
        if self.exclude_missing_discharge:
            parts.append("Exclude stays with missing ICU discharge information.")
        if self.min_stay_hours is not None:
            parts.append(f"Include only ICU stays of at least {self.min_stay_hours:g} hours.")
        if self.exclude_multiple_icu_stays:
            if self.multiple_stay_mode is MultipleStayMode.EXCLUDE_ALL:
                parts.append("Exclude every stay of patients with multiple ICU stays.")
            else:
                parts.append("For patients with multiple ICU stays keep only their first stay.")
        if self.exclude_missing_gender:
            parts.append("Exclude patients with missing gender.")
        if self.min_clinical_records:
            c = self.min_clinical_records
            parts.append(f"Include only stays with at least {c.min_count} {c.label} records.")
        return " ".join(parts) if parts else "Include all ICU stays."


def _multiple_stay_filter(stays: tuple[StayRecord, ...], mode: MultipleStayMode) -> set[int]:
    """Stay IDs that survive the multiple-stay rule, judged on the full population."""
    counts = Counter(s.patient_id for s in stays)
    if mode is MultipleStayMode.EXCLUDE_ALL:
        return {s.stay_id for s in stays if counts[s.patient_id] == 1}
    first: dict[str, StayRecord] = {}
    for s in stays:
        cur = first.get(s.patient_id)
        if cur is None or (s.intime, s.stay_id) < (cur.intime, cur.stay_id):
            first[s.patient_id] = s
    return {s.stay_id for s in first.values()}


def _record_counts(fixture: Fixture, crit: ClinicalRecordCriterion) -> Counter:
    keys = {it.key for it in fixture.items}
    unknown = [c for c in crit.codes if c not in keys]
    if unknown:
        raise ValueError(f"clinical record codes {unknown} do not exist in the fixture")
    wanted = set(crit.codes)
    return Counter(e.stay_id for e in fixture.events if e.key in wanted)


def gold_stay_ids(fixture: Fixture, criteria: CohortCriteria) -> frozenset[int]:
    """Apply the criteria to the canonical stays.

    The multiple-stay rule is evaluated on the whole population first; every
    other predicate looks at one stay at a time.
    """
    stays = fixture.stays
    keep_multi = (_multiple_stay_filter(stays, criteria.multiple_stay_mode)
                  if criteria.exclude_multiple_icu_stays else None)
    counts = (_record_counts(fixture, criteria.min_clinical_records)
              if criteria.min_clinical_records else None)
    out = set()
    for s in stays:
        if keep_multi is not None and s.stay_id not in keep_multi:
            continue
        if criteria.age_range and not criteria.age_range[0] <= s.age <= criteria.age_range[1]:
            continue
        g = criteria.gender_filter
        if g is GenderFilter.BOTH and s.gender not in ("Male", "Female"):
            continue
        if g in (GenderFilter.MALE, GenderFilter.FEMALE) and s.gender != g.value:
            continue
        if criteria.exclude_missing_discharge and s.los_minutes is None:
            continue
        if criteria.min_stay_hours is not None and (
            s.los_minutes is None or s.los_minutes < criteria.min_stay_hours * 60
        ):
            continue
        if criteria.exclude_missing_gender and s.gender is None:
            continue
        if counts is not None and counts[s.stay_id] < criteria.min_clinical_records.min_count:
            continue
        out.add(s.stay_id)
    return frozenset(out)


def gold_value(stay: StayRecord, kind: FeatureKind) -> Any:
    if kind is FeatureKind.IDENTIFIER:
        return stay.stay_id
    if kind is FeatureKind.GENDER:
        return stay.gender or "Unknown"
    if kind is FeatureKind.MORTALITY:
        return stay.mortality or "Unknown"
    if kind is FeatureKind.INTEGER:
        return stay.age
    if kind is FeatureKind.FLOAT4:
        return stay.los_hours
    raise ValueError(f"unsupported kind {kind}")


@dataclass(frozen=True)
class GoldCohort:
    stay_ids: frozenset[int]
    spec: FeatureFormatSpec
    rows: tuple[tuple, ...]

    def table_by_id(self) -> dict[str, tuple]:
        return {str(r[0]): r for r in self.rows}


def build_gold_cohort(fixture: Fixture, criteria: CohortCriteria,
                      spec: FeatureFormatSpec | None = None) -> GoldCohort:
    spec = spec or STANDARD_SPEC
    ids = gold_stay_ids(fixture, criteria)
    rows = tuple(
        tuple(gold_value(s, k) for k in spec.kinds)
        for s in fixture.stays if s.stay_id in ids
    )
    return GoldCohort(ids, spec, rows)


STANDARD_SPEC = FeatureFormatSpec.of(
    ("ICU-stay id", FeatureKind.IDENTIFIER),
    ("gender", FeatureKind.GENDER),
    ("age", FeatureKind.INTEGER),
    ("length of stay", FeatureKind.FLOAT4),
    ("mortality", FeatureKind.MORTALITY),
)


def glucose_criterion(fixture: Fixture, min_count: int = 15, combinator: str = "any-of") -> ClinicalRecordCriterion:
    keys = GLUCOSE_KEYS[fixture.style]
    if combinator == "single":
        keys = keys[:1]
    return ClinicalRecordCriterion(keys, min_count, combinator, "glucose")


def random_criteria(rng: np.random.Generator, fixture: Fixture) -> CohortCriteria:
    """A random combination of the seven criteria for oracle cross-checks."""
    age = None
    if rng.random() < 0.5:
        lo = int(rng.integers(16, 80))
        age = (lo, int(rng.integers(lo, 96)))
    gender = None
    if rng.random() < 0.5:
        gender = list(GenderFilter)[int(rng.integers(0, 3))]
    records = None
    if rng.random() < 0.4:
        combinator = "single" if rng.random() < 0.3 else "any-of"
        records = glucose_criterion(fixture, int(rng.integers(1, 25)), combinator)
    return CohortCriteria(
        age_range=age,
        gender_filter=gender,
        exclude_missing_discharge=bool(rng.random() < 0.5),
        min_stay_hours=float(rng.integers(0, 120)) if rng.random() < 0.5 else None,
        exclude_multiple_icu_stays=bool(rng.random() < 0.4),
        exclude_missing_gender=bool(rng.random() < 0.4),
        min_clinical_records=records,
        multiple_stay_mode=MultipleStayMode.FIRST_STAY if rng.random() < 0.3 else MultipleStayMode.EXCLUDE_ALL,
    )
