"""Independent reference implementations used to check the package.

Each function recomputes a quantity from raw inputs by a different route
than the package: the gold cohort from the gold CSV files with pandas, and
the scores by enumerating one decision at a time.
"""

from __future__ import annotations

from typing import Iterable, Mapping

import pandas as pd

from emrprep.bench.cohort import CohortCriteria, GenderFilter, MultipleStayMode
from emrprep.bench.fixtures import FixturePaths


def read_gold(paths: FixturePaths) -> tuple[pd.DataFrame, pd.DataFrame]:
    stays = pd.read_csv(paths.gold_stays, dtype={"patient_id": str, "gender": str, "mortality": str})
    events = pd.read_csv(paths.gold_events, dtype={"key": str})
    return stays, events


def pandas_gold_ids(stays: pd.DataFrame, events: pd.DataFrame, c: CohortCriteria) -> set[int]:
    keep = pd.Series(True, index=stays.index)
    if c.exclude_multiple_icu_stays:
        if c.multiple_stay_mode is MultipleStayMode.EXCLUDE_ALL:
            n = stays.groupby("patient_id")["stay_id"].transform("size")
            keep &= n == 1
        else:
            first = stays.sort_values(["intime", "stay_id"]).drop_duplicates("patient_id", keep="first")
            keep &= stays["stay_id"].isin(first["stay_id"])
    if c.age_range is not None:
        keep &= stays["age"].between(c.age_range[0], c.age_range[1], inclusive="both")
    if c.gender_filter is GenderFilter.BOTH:
        keep &= stays["gender"].isin(["Male", "Female"])
    elif c.gender_filter is not None:
        keep &= stays["gender"] == c.gender_filter.value
    if c.exclude_missing_discharge:
        keep &= stays["los_minutes"].notna()
    if c.min_stay_hours is not None:
        keep &= stays["los_minutes"].fillna(-1) >= c.min_stay_hours * 60
    if c.exclude_missing_gender:
        keep &= stays["gender"].notna()
    if c.min_clinical_records is not None:
        r = c.min_clinical_records
        counts = events[events["key"].isin(r.codes)].groupby("stay_id").size()
        keep &= stays["stay_id"].map(counts).fillna(0) >= r.min_count
    return set(int(v) for v in stays.loc[keep, "stay_id"])


# -- scores -------------------------------------------------------------------


def brute_cohort_f1(predicted: Iterable, gold: Iterable) -> float:
    P, G = set(predicted), set(gold)
    tp = fp = fn = 0
    for x in P | G:
        if x in P and x in G:
            tp += 1
        elif x in P:
            fp += 1
        else:
            fn += 1
    if not P:
        return 0.0
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def brute_mapping(predicted: Mapping[str, set[str]], gold: Mapping[str, set[str]],
                  universe: set[str]) -> tuple[float, float]:
    """(micro F1, balanced accuracy) by classifying every (feature, item) decision."""
    tp = fp = fn = tn = 0
    for feature, G in gold.items():
        P = predicted.get(feature, set())
        for item in universe | P:
            p, g = item in P, item in G
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1
    # one extra presence decision per feature without gold items
    pres_fp = pres_tn = 0
    for feature, G in gold.items():
        if not G:
            if predicted.get(feature):
                pres_fp += 1
            else:
                pres_tn += 1
    recall = tp / (tp + fn) if tp + fn else 1.0
    spec_den = tn + pres_tn + fp + pres_fp
    specificity = (tn + pres_tn) / spec_den if spec_den else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0
    return f1, (recall + specificity) / 2


# -- event stream -----------------------------------------------------------------


def oracle_event_stream(fixture, cohort_ids: Iterable, features: Iterable[str], start: int, end: int
                        ) -> list[tuple[int, int, str, float]]:
    """Gold events of the cohort joined with each feature's gold items, inside the window."""
    gold = fixture.mapping_gold().features
    ids = {int(i) for i in cohort_ids}
    rows = []
    for feature in features:
        items = gold[feature].items()
        for e in fixture.events:
            if e.key in items and e.stay_id in ids and e.offset is not None and start <= e.offset <= end:
                rows.append((e.stay_id, e.offset, feature, float(e.value)))
    return sorted(rows)


def normalize_stream(rows) -> list[tuple[int, int, str, float]]:
    return sorted((int(r[0]), int(r[1]), str(r[2]), float(r[3])) for r in rows)
