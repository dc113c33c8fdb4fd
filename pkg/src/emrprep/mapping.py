"""Per-feature code-mapping outcomes shared by the mapping agent and the evaluator."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping


class Outcome(str, enum.Enum):
    COLUMN_REFS = "ColumnRefs"
    ROW_CODES = "RowCodes"
    NAMES_ONLY = "NamesOnly"
    ABSENT = "Absent"


@dataclass(frozen=True)
class MappingResult:
    """Where a standard feature lives in one database.

    ``refs`` holds ``table.column`` strings (ColumnRefs), ``codes`` holds
    (code, name) pairs (RowCodes) and ``names`` holds feature names
    (NamesOnly). ``scores`` maps a candidate label to its final score.
    """

    feature: str
    outcome: Outcome
    refs: tuple[str, ...] = ()
    codes: tuple[tuple[str, str], ...] = ()
    names: tuple[str, ...] = ()
    scores: tuple[tuple[str, int], ...] = ()
    failed: bool = False
    error: str = ""

    def __post_init__(self) -> None:
        if self.outcome is Outcome.COLUMN_REFS and not self.refs:
            raise ValueError("ColumnRefs needs at least one column reference")
        if self.outcome is Outcome.ROW_CODES and not self.codes:
            raise ValueError("RowCodes needs at least one code")
        if self.outcome is Outcome.NAMES_ONLY and not self.names:
            raise ValueError("NamesOnly needs at least one name")
        if self.outcome is Outcome.ABSENT and (self.refs or self.codes or self.names):
            raise ValueError("Absent carries no items")

    @classmethod
    def absent(cls, feature: str, failed: bool = False, error: str = "") -> "MappingResult":
        return cls(feature, Outcome.ABSENT, failed=failed, error=error)

    def items(self) -> frozenset[str]:
        """The strings scored by the evaluator."""
        if self.outcome is Outcome.COLUMN_REFS:
            return frozenset(r.lower() for r in self.refs)
        if self.outcome is Outcome.ROW_CODES:
            return frozenset(c for c, _ in self.codes)
        if self.outcome is Outcome.NAMES_ONLY:
            return frozenset(self.names)
        return frozenset()

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "refs": list(self.refs),
            "codes": [list(c) for c in self.codes],
            "names": list(self.names),
            "scores": [list(s) for s in self.scores],
            "failed": self.failed,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, feature: str, data: Mapping) -> "MappingResult":
        try:
            outcome = Outcome(data["outcome"])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"mapping entry for {feature!r} has no valid outcome") from exc
        return cls(
            feature,
            outcome,
            tuple(data.get("refs", ())),
            tuple((str(c), str(n)) for c, n in data.get("codes", ())),
            tuple(data.get("names", ())),
            tuple((str(k), int(v)) for k, v in data.get("scores", ())),
            bool(data.get("failed", False)),
            str(data.get("error", "")),
        )


def mapping_to_json(results: Iterable[MappingResult]) -> str:
    return json.dumps({r.feature: r.to_dict() for r in results}, indent=2, ensure_ascii=False)


def mapping_from_json(text: str) -> dict[str, MappingResult]:
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("mapping file must hold a JSON object keyed by feature")
    return {k: MappingResult.from_dict(k, v) for k, v in data.items()}


def save_mapping(results: Iterable[MappingResult], path: str | Path) -> None:
    Path(path).write_text(mapping_to_json(results) + "\n", encoding="utf-8")


def load_mapping(path: str | Path) -> dict[str, MappingResult]:
    return mapping_from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class MappingGold:
    """Gold outcome per feature plus the fixture-wide item universe."""

    features: Mapping[str, MappingResult]
    universe: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        for name, result in self.features.items():
            missing = result.items() - self.universe
            if missing:
                raise ValueError(f"gold items for {name!r} are not in the fixture: {sorted(missing)}")

    def negatives(self, feature: str) -> frozenset[str]:
        return self.universe - self.features[feature].items()
