"""Cohort and mapping scores, trial aggregation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from ..formats import FeatureKind, normalize_value
from ..mapping import MappingGold, MappingResult
from .cohort import GoldCohort

log = logging.getLogger(__name__)


def _id(value: Any) -> str:
    text = str(value).strip()
    try:
        f = float(text)
    except ValueError:
        return text
    return str(int(f)) if f.is_integer() else text


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


@dataclass(frozen=True)
class CohortScore:
    f1: float
    precision: float
    recall: float
    format_accuracy: float
    predicted: int
    gold: int
    overlap: int
    duplicate_ids: tuple[str, ...] = ()


def evaluate_cohort(predicted_ids: Iterable[Any], gold: GoldCohort,
                    predicted_rows: Sequence[Sequence[Any]] | None = None) -> CohortScore:
    """F1 over unique stay IDs plus row-level format accuracy on the overlap.

    Duplicate predicted IDs are collapsed before scoring and listed in the
    result. An empty prediction scores F1 = 0.
    """
    ids = [_id(v) for v in predicted_ids]
    seen, dups = set(), []
    for i in ids:
        if i in seen and i not in dups:
            dups.append(i)
        seen.add(i)
    P = seen
    G = {_id(v) for v in gold.stay_ids}
    overlap = P & G
    if not P:
        f1 = precision = recall = 0.0
    else:
        precision = len(overlap) / len(P)
        recall = len(overlap) / len(G) if G else 0.0
        f1 = 0.0 if not overlap else 2 * precision * recall / (precision + recall)
    accuracy = 0.0
    if predicted_rows is not None and overlap:
        accuracy = format_accuracy(predicted_rows, gold, overlap)
    return CohortScore(f1, precision, recall, accuracy, len(P), len(G), len(overlap), tuple(dups))


def format_accuracy(rows: Sequence[Sequence[Any]], gold: GoldCohort, overlap: set[str]) -> float:
    """Share of overlapping stays whose every feature value equals the gold value."""
    gold_rows = gold.table_by_id()
    first: dict[str, Sequence[Any]] = {}
    for r in rows:
        first.setdefault(_id(r[0]), r)
    kinds = gold.spec.kinds
    good = 0
    for sid in overlap:
        pr, gr = first[sid], gold_rows[sid]
        if len(pr) != len(kinds):
            continue
        if all(
            normalize_value(k, p) == normalize_value(k, g)
            for k, p, g in zip(kinds, pr, gr)
            if k is not FeatureKind.IDENTIFIER
        ):
            good += 1
    return good / len(overlap)


@dataclass(frozen=True)
class MappingScore:
    f1: float
    balanced_accuracy: float
    precision: float
    recall: float
    specificity: float
    tp: int
    fp: int
    fn: int
    tn: int
    macro_f1: float
    unknown_items: tuple[str, ...] = ()


def evaluate_mapping(predicted: Mapping[str, MappingResult], gold: MappingGold) -> MappingScore:
    """Micro F1 over mapped items and balanced accuracy.

    Negatives for a feature are the fixture items that are not gold for it.
    A feature with no gold item adds one presence decision: TN when predicted
    Absent, FP otherwise. Items outside the fixture count as FP and are logged.
    A ratio with a zero denominator is 1.0.
    """
    tp = fp = fn = tn = presence_fp = 0
    per_feature = []
    unknown: list[str] = []
    for feature, gold_result in gold.features.items():
        G = gold_result.items()
        pred = predicted.get(feature)
        P = pred.items() if pred is not None else frozenset()
        outside = P - gold.universe
        if outside:
            log.warning("prediction for %r names items outside the fixture: %s", feature, sorted(outside))
            unknown.extend(sorted(outside))
        f_tp, f_fp, f_fn = len(P & G), len(P - G), len(G - P)
        tp, fp, fn = tp + f_tp, fp + f_fp, fn + f_fn
        per_feature.append(f1_score(f_tp, f_fp, f_fn))
        negatives = gold.universe - G
        tn += len(negatives - P)
        if not G:
            if P:
                presence_fp += 1
            else:
                tn += 1
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    spec_fp = fp + presence_fp
    specificity = 1.0 if tn + spec_fp == 0 else tn / (tn + spec_fp)
    macro = sum(per_feature) / len(per_feature) if per_feature else 1.0
    return MappingScore(
        f1_score(tp, fp, fn), (recall + specificity) / 2, precision, recall, specificity,
        tp, fp, fn, tn, macro, tuple(unknown),
    )


@dataclass
class EvaluationReport:
    metric: str
    scores: list[float]
    failed: list[bool] = field(default_factory=list)
    details: list[dict] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.scores)

    @property
    def mean(self) -> float:
        return sum(self.scores) / self.n if self.n else 0.0

    @property
    def stderr(self) -> float:
        if self.n < 2:
            return 0.0
        m = self.mean
        var = sum((s - m) ** 2 for s in self.scores) / (self.n - 1)
        return math.sqrt(var) / math.sqrt(self.n)

    def to_json(self) -> str:
        data = asdict(self)
        data.update(mean=self.mean, stderr=self.stderr, n=self.n)
        return json.dumps(data, indent=2, sort_keys=True, default=str)

    def to_table(self) -> str:
        lines = [f"{'trial':>5}  {self.metric:>10}  failed"]
        for i, (s, f) in enumerate(zip(self.scores, self.failed)):
            lines.append(f"{i + 1:>5}  {s:>10.4f}  {'yes' if f else 'no'}")
        lines.append(f"{'mean':>5}  {self.mean:>10.4f}  stderr {self.stderr:.4f}")
        return "\n".join(lines)


def run_trials(runner: Callable[[int], float | tuple[float, dict]], n_trials: int,
               seeds: Sequence[int] | None = None, metric: str = "score") -> EvaluationReport:
    """Run ``runner(seed)`` per trial; a raising trial scores 0 and is flagged."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    seeds = list(seeds) if seeds is not None else list(range(n_trials))
    if len(seeds) < n_trials:
        raise ValueError("fewer seeds than trials")
    report = EvaluationReport(metric, [])
    for seed in seeds[:n_trials]:
        try:
            out = runner(seed)
        except Exception as exc:  # a terminal agent failure is a scored outcome
            log.warning("trial with seed %s failed: %s", seed, exc)
            report.scores.append(0.0)
            report.failed.append(True)
            report.details.append({"seed": seed, "error": str(exc)})
            continue
        score, detail = out if isinstance(out, tuple) else (out, {})
        report.scores.append(float(score))
        report.failed.append(False)
        report.details.append({"seed": seed, **detail})
    return report
