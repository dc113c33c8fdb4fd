"""Requested feature formats and per-value validation."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Any, Iterable, Sequence


class FeatureKind(str, enum.Enum):
    IDENTIFIER = "identifier"
    GENDER = "enum(Male,Female,Unknown)"
    MORTALITY = "enum(Dead,Alive,Unknown)"
    INTEGER = "integer"
    FLOAT4 = "float-rounded(4)"

    @property
    def is_enum(self) -> bool:
        return self in (FeatureKind.GENDER, FeatureKind.MORTALITY)


ENUM_VALUES = {
    FeatureKind.GENDER: ("Male", "Female", "Unknown"),
    FeatureKind.MORTALITY: ("Dead", "Alive", "Unknown"),
}

_INT_TEXT = re.compile(r"^[+-]?\d+$")


def value_matches(kind: FeatureKind, value: Any) -> bool:
    """True when ``value`` is a well-formed instance of ``kind``."""
    if value is None:
        return False
    if kind is FeatureKind.IDENTIFIER:
        if isinstance(value, bool):
            return False
        if isinstance(value, int):
            return True
        return isinstance(value, str) and value.strip() != ""
    if kind.is_enum:
        return isinstance(value, str) and value in ENUM_VALUES[kind]
    if kind is FeatureKind.INTEGER:
        if isinstance(value, bool):
            return False
        if isinstance(value, int):
            return True
        return isinstance(value, str) and bool(_INT_TEXT.match(value.strip()))
    if kind is FeatureKind.FLOAT4:
        if isinstance(value, bool):
            return False
        try:
            x = float(value)
        except (TypeError, ValueError):
            return False
        return math.isfinite(x) and round(x, 4) == x
    raise ValueError(f"unknown kind {kind!r}")


def normalize_value(kind: FeatureKind, value: Any) -> Any:
    """Canonical comparison form used when scoring format accuracy."""
    if value is None:
        return None
    if kind is FeatureKind.IDENTIFIER:
        return str(value).strip()
    if kind.is_enum:
        return str(value)
    if kind is FeatureKind.INTEGER:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        text = str(value).strip()
        return int(text) if _INT_TEXT.match(text) else ("<invalid>", text)
    if kind is FeatureKind.FLOAT4:
        try:
            return round(float(value), 4)
        except (TypeError, ValueError):
            return ("<invalid>", str(value))
    raise ValueError(f"unknown kind {kind!r}")


@dataclass(frozen=True)
class FeatureFormat:
    name: str
    kind: FeatureKind


@dataclass(frozen=True)
class FeatureFormatSpec:
    """Ordered (name, kind) list; the first entry is always the stay identifier."""

    features: tuple[FeatureFormat, ...]

    def __post_init__(self) -> None:
        if not self.features:
            raise ValueError("a feature format spec needs at least the stay identifier")
        if self.features[0].kind is not FeatureKind.IDENTIFIER:
            raise ValueError("the first feature must be the stay identifier")

    @classmethod
    def of(cls, *pairs: tuple[str, FeatureKind]) -> "FeatureFormatSpec":
        return cls(tuple(FeatureFormat(n, k) for n, k in pairs))

    @property
    def feature_count(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def kinds(self) -> list[FeatureKind]:
        return [f.kind for f in self.features]

    @classmethod
    def from_request_text(cls, text: str) -> "FeatureFormatSpec":
        """Parse a request such as ``ICU-stay id, gender (Male/Female/Unknown), age (integer)``."""
        items = [s.strip() for s in _split_top_level_commas(text) if s.strip()]
        features = []
        for i, item in enumerate(items):
            name, _, detail = item.partition("(")
            name = name.strip()
            detail = detail.rstrip(")").lower()
            if i == 0:
                kind = FeatureKind.IDENTIFIER
            elif "male/female" in detail:
                kind = FeatureKind.GENDER
            elif "dead/alive" in detail:
                kind = FeatureKind.MORTALITY
            elif "4 decimals" in detail:
                kind = FeatureKind.FLOAT4
            elif "integer" in detail:
                kind = FeatureKind.INTEGER
            else:
                raise ValueError(f"cannot infer the format of requested feature {item!r}")
            features.append(FeatureFormat(name, kind))
        return cls(tuple(features))

    def to_request_text(self) -> str:
        parts = []
        for f in self.features:
            if f.kind is FeatureKind.IDENTIFIER:
                parts.append(f.name)
            elif f.kind is FeatureKind.GENDER:
                parts.append(f"{f.name} (Male/Female/Unknown)")
            elif f.kind is FeatureKind.MORTALITY:
                parts.append(f"{f.name} (Dead/Alive/Unknown)")
            elif f.kind is FeatureKind.INTEGER:
                parts.append(f"{f.name} (integer)")
            else:
                parts.append(f"{f.name} (hours, rounded to 4 decimals in float format)")
        return ", ".join(parts)


def _split_top_level_commas(text: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth = max(0, depth - 1)
        if ch == "," and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return out


@dataclass(frozen=True)
class ColumnCheck:
    name: str
    kind: FeatureKind
    passed: bool
    bad_values: tuple[Any, ...] = ()


def validate_feature_formats(
    rows: Iterable[Sequence[Any]], spec: FeatureFormatSpec, *, max_examples: int = 5
) -> list[ColumnCheck]:
    """Check every column of ``rows`` against its requested kind.

    Report-only: never raises on bad data. Rows must have ``spec.feature_count``
    values each.
    """
    bad: list[list[Any]] = [[] for _ in spec.features]
    failed = [False] * spec.feature_count
    for row in rows:
        if len(row) != spec.feature_count:
            raise ValueError(
                f"row has {len(row)} values but the format lists {spec.feature_count} features"
            )
        for j, (fmt, value) in enumerate(zip(spec.features, row)):
            if not value_matches(fmt.kind, value):
                failed[j] = True
                if len(bad[j]) < max_examples:
                    bad[j].append(value)
    return [
        ColumnCheck(f.name, f.kind, not failed[j], tuple(bad[j]))
        for j, f in enumerate(spec.features)
    ]
