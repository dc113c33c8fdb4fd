"""Grammars for LLM completions.

Every parser either returns a typed value or raises :class:`MalformedResponse`;
agents count that error against their retry budgets. Classification tokens
are matched case- and whitespace-insensitively, structural delimiters
(tags, ``||``, braces) exactly.
"""

from __future__ import annotations

import ast
import enum
import re
import warnings
from dataclasses import dataclass, field
from typing import Iterable

from .sqltext import split_outside_quotes, statements, strip_code_fences


class MalformedResponse(ValueError):
    pass


class BudgetViolation(MalformedResponse):
    """More SQL queries than allowed; ``queries`` keeps the full parsed list."""

    def __init__(self, queries: list[str], limit: int):
        super().__init__(f"{len(queries)} queries exceed the limit of {limit}")
        self.queries = queries
        self.limit = limit


# -- tagged sections ---------------------------------------------------------


def parse_tagged_section(text: str, tag: str) -> str | None:
    """Inner text of the first ``<tag>...</tag>`` pair, stripped.

    Returns None when the opening tag is absent. An opening tag without a
    closing tag, or an identical tag nested inside the pair, is malformed.
    """
    if not isinstance(text, str):
        raise MalformedResponse("completion is not text")
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    start = text.find(open_tag)
    if start < 0:
        if text.find(close_tag) >= 0:
            raise MalformedResponse(f"closing {close_tag} without opening tag")
        return None
    body_start = start + len(open_tag)
    end = text.find(close_tag, body_start)
    if end < 0:
        raise MalformedResponse(f"{open_tag} is never closed")
    if text.find(open_tag, body_start, end) >= 0:
        raise MalformedResponse(f"nested {open_tag} tags")
    return text[body_start:end].strip()


def remove_tagged_section(text: str, tag: str) -> str:
    """``text`` with the first ``<tag>...</tag>`` span cut out (if any)."""
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    start = text.find(open_tag)
    if start < 0:
        return text
    end = text.find(close_tag, start)
    if end < 0:
        return text
    return text[:start] + text[end + len(close_tag):]


@dataclass(frozen=True)
class TaggedDocument:
    raw: str
    sections: dict[str, str] = field(default_factory=dict)

    @classmethod
    def parse(cls, raw: str, tags: Iterable[str]) -> "TaggedDocument":
        found = {}
        for tag in tags:
            body = parse_tagged_section(raw, tag)
            if body is not None:
                found[tag] = body
        return cls(raw, found)


# -- classification tokens ---------------------------------------------------

_BRACKETED = re.compile(r"<\s*([^<>/][^<>]*?)\s*>")


def _norm_token(token: str) -> str:
    return re.sub(r"\s+", " ", token.strip()).lower()


def parse_classification(section: str | None, allowed: Iterable[str]) -> str:
    """The single allowed ``<token>`` present in ``section``."""
    allowed = list(allowed)
    if not allowed:
        raise ValueError("allowed token set is empty")
    if section is None:
        raise MalformedResponse("classification section is missing")
    lookup = {_norm_token(a): a for a in allowed}
    hits = {lookup[n] for n in (_norm_token(m) for m in _BRACKETED.findall(section)) if n in lookup}
    if len(hits) != 1:
        raise MalformedResponse(
            f"expected exactly one of {sorted(allowed)}, found {sorted(hits) or 'none'}"
        )
    return hits.pop()


class ErrorClass(str, enum.Enum):
    SYNTAX_ERROR = "syntax error"
    WRONG_SCHEMA = "wrong schema"


def parse_error_class(section: str | None) -> ErrorClass:
    token = parse_classification(section, [e.value for e in ErrorClass])
    return ErrorClass(token)


# -- SQL lists ---------------------------------------------------------------


def parse_sql_queries(section: str | None, max_queries: int) -> list[str]:
    """Split on ``||`` outside quoted literals; trims, drops empties."""
    if max_queries < 1:
        raise ValueError("max_queries must be >= 1")
    if section is None:
        raise MalformedResponse("SQL section is missing")
    queries = [strip_code_fences(q).strip() for q in split_outside_quotes(strip_code_fences(section), "||")]
    queries = [q.rstrip(";").strip() for q in queries]
    queries = [q for q in queries if q]
    if len(queries) > max_queries:
        raise BudgetViolation(queries, max_queries)
    return queries


def parse_sql_query(section: str | None) -> str:
    """Exactly one SQL statement (code fences tolerated)."""
    if section is None:
        raise MalformedResponse("SQL section is missing")
    text = strip_code_fences(section)
    stmts = statements(text)
    if len(stmts) != 1:
        raise MalformedResponse(f"expected one SQL statement, found {len(stmts)}")
    return text.strip().rstrip(";").strip()


# -- candidate tuples and similarity maps ------------------------------------


def _is_code(value: object) -> bool:
    if isinstance(value, bool):
        return False
    if isinstance(value, int):
        return True
    return isinstance(value, str) and value.strip().isdigit()


@dataclass(frozen=True)
class CandidateTuple:
    """A (code, name, unit) candidate; ``arity`` records how it was written."""

    code: str | None
    name: str
    unit: str | None = None
    arity: int = field(default=3, compare=False)

    def __post_init__(self) -> None:
        if not self.name or not self.name.strip():
            raise ValueError("candidate name must be non-empty")
        if not 1 <= self.arity <= 3:
            raise ValueError("candidate arity must be 1..3")

    @classmethod
    def from_values(cls, values: tuple) -> "CandidateTuple":
        """Build from a 1-3 element tuple.

        Two elements read as (code, name) when the first looks like a code,
        else as (name, unit).
        """
        if not isinstance(values, tuple) or not 1 <= len(values) <= 3:
            raise ValueError(f"candidate tuples need 1-3 elements, got {values!r}")
        clean = tuple(None if v is None else str(v).strip() for v in values)
        if len(clean) == 1:
            return cls(None, clean[0] or "", None, 1)
        if len(clean) == 2:
            if _is_code(values[0]):
                return cls(clean[0], clean[1] or "", None, 2)
            return cls(None, clean[0] or "", clean[1] or None, 2)
        return cls(clean[0] or None, clean[1] or "", clean[2] or None, 3)

    def values(self) -> tuple:
        code: object = self.code
        if self.code is not None and self.code.isdigit() and str(int(self.code)) == self.code:
            code = int(self.code)
        if self.arity == 1:
            return (self.name,)
        if self.arity == 2:
            return (code, self.name) if self.code is not None else (self.name, self.unit)
        return (code, self.name, self.unit)

    def literal(self) -> str:
        return repr(self.values())


SimilarityMap = dict[str, list[tuple[CandidateTuple, int]]]

_OPENERS = {"(": ")", "[": "]", "{": "}"}
_SCORE = re.compile(r"^\d{1,3}$")


def _split_top(text: str, sep: str) -> list[str]:
    """Split on ``sep`` at bracket depth 0 and outside quotes."""
    parts, depth, start, i, n = [], 0, 0, 0, len(text)
    while i < n:
        ch = text[i]
        if ch in ("'", '"'):
            j = i + 1
            while j < n and text[j] != ch:
                j += 2 if text[j] == "\\" else 1
            i = j + 1
            continue
        if ch in _OPENERS:
            depth += 1
        elif ch in ")]}":
            depth = max(0, depth - 1)
        elif depth == 0 and text.startswith(sep, i):
            parts.append(text[start:i])
            i += len(sep)
            start = i
            continue
        i += 1
    parts.append(text[start:])
    return parts


def _parse_tuple_literal(text: str) -> tuple:
    try:
        with warnings.catch_warnings():
            # model text may hold stray backslashes; they are data, not a code smell
            warnings.simplefilter("ignore", (DeprecationWarning, SyntaxWarning))
            value = ast.literal_eval(text.strip())
    except Exception as exc:  # literal_eval raises many types on junk
        raise MalformedResponse(f"not a tuple literal: {text.strip()[:60]!r}") from exc
    if isinstance(value, str):
        value = (value,)
    if not isinstance(value, tuple):
        raise MalformedResponse(f"not a tuple literal: {text.strip()[:60]!r}")
    return value


def _parse_pairs(body: str) -> list[tuple[CandidateTuple, int]]:
    out: list[tuple[CandidateTuple, int]] = []
    seen: set[CandidateTuple] = set()
    for pair in _split_top(body, "||"):
        if not pair.strip():
            continue
        pieces = _split_top(pair, ":")
        if len(pieces) < 2:
            raise MalformedResponse(f"pair without score: {pair.strip()[:60]!r}")
        key, score_text = ":".join(pieces[:-1]), pieces[-1].strip()
        if not _SCORE.match(score_text):
            raise MalformedResponse(f"score {score_text!r} is not an integer")
        score = int(score_text)
        if score > 100:
            raise MalformedResponse(f"score {score} outside 0-100")
        try:
            cand = CandidateTuple.from_values(_parse_tuple_literal(key))
        except ValueError as exc:
            raise MalformedResponse(str(exc)) from exc
        if cand in seen:
            raise MalformedResponse(f"duplicate candidate {cand.literal()}")
        seen.add(cand)
        out.append((cand, score))
    return out


def parse_similarity_map(text: str | None, default_feature: str | None = None) -> SimilarityMap:
    """Parse ``Feature: {(tuple): score || ...}; Feature2: {...}``.

    A bare ``(tuple): score || ...`` list (no feature wrapper) is attributed
    to ``default_feature``.
    """
    if text is None:
        raise MalformedResponse("similarity section is missing")
    text = strip_code_fences(text).strip()
    result: SimilarityMap = {}
    for entry in _split_top(text, ";"):
        entry = entry.strip()
        if not entry:
            continue
        brace = _top_level_index(entry, "{")
        if brace is None:
            if default_feature is None:
                raise MalformedResponse("similarity entry has no feature name")
            feature, body = default_feature, entry
        else:
            feature = entry[:brace].strip()
            if not feature.endswith(":"):
                raise MalformedResponse(f"feature name not followed by ':' in {entry[:60]!r}")
            feature = feature[:-1].strip()
            if not entry.endswith("}"):
                raise MalformedResponse(f"unterminated dictionary for {feature!r}")
            body = entry[brace + 1:-1]
            if not feature:
                raise MalformedResponse("empty feature name")
        pairs = _parse_pairs(body)
        if feature in result:
            existing = {c for c, _ in result[feature]}
            if existing & {c for c, _ in pairs}:
                raise MalformedResponse(f"duplicate candidate for {feature!r}")
            result[feature].extend(pairs)
        else:
            result[feature] = pairs
    return result


def _top_level_index(text: str, target: str) -> int | None:
    depth, i, n = 0, 0, len(text)
    while i < n:
        ch = text[i]
        if ch in ("'", '"'):
            j = i + 1
            while j < n and text[j] != ch:
                j += 1
            i = j + 1
            continue
        if ch == target and depth == 0:
            return i
        if ch in _OPENERS:
            depth += 1
        elif ch in ")]}":
            depth = max(0, depth - 1)
        i += 1
    return None


def serialize_similarity_map(smap: SimilarityMap) -> str:
    return "; ".join(
        f"{feature}: {{" + "|| ".join(f"{c.literal()}: {s}" for c, s in pairs) + "}"
        for feature, pairs in smap.items()
    )


# -- feature locating --------------------------------------------------------


@dataclass(frozen=True)
class ColumnRef:
    schema: str
    table: str
    column: str

    def __str__(self) -> str:
        return f"{self.schema}.{self.table}.{self.column}"

    @property
    def table_column(self) -> str:
        return f"{self.table}.{self.column}".lower()


_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_$]*$")


def parse_feature_column(section: str | None) -> list[ColumnRef] | None:
    """``schema.table.column || ...`` -> refs; literal ``None`` -> None."""
    if section is None:
        raise MalformedResponse("feature column section is missing")
    text = section.strip()
    if text.lower() == "none":
        return None
    if not text:
        raise MalformedResponse("empty feature column section")
    refs = []
    for item in text.split("||"):
        item = item.strip().strip("`")
        if not item:
            continue
        parts = [p.strip().strip('"') for p in item.split(".")]
        if len(parts) != 3 or not all(_IDENT.match(p) for p in parts):
            raise MalformedResponse(f"expected SchemaName.TableName.ColumnName, got {item!r}")
        refs.append(ColumnRef(*parts))
    if not refs:
        raise MalformedResponse("no column references found")
    return refs


def locate_feature_section(text: str) -> str | None:
    """The feature-column section under either spelling used by the prompt."""
    for tag in ("feature column", "featurecolumn"):
        body = parse_tagged_section(text, tag)
        if body is not None:
            return body
    return None


# -- schema linking ----------------------------------------------------------


@dataclass(frozen=True)
class LinkedColumn:
    name: str
    values: tuple[str, ...] = ()


@dataclass(frozen=True)
class LinkedTable:
    schema: str | None
    name: str
    columns: tuple[LinkedColumn, ...]

    @property
    def qualified(self) -> str:
        return f"{self.schema}.{self.name}" if self.schema else self.name

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]


@dataclass(frozen=True)
class LinkedSchema:
    tables: tuple[LinkedTable, ...] = ()

    def table(self, name: str) -> LinkedTable | None:
        name = name.split(".")[-1].lower()
        for t in self.tables:
            if t.name.lower() == name:
                return t
        return None

    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def __bool__(self) -> bool:
        return bool(self.tables)


MAPPING_LABEL = "Mapping Table"
FEATURE_LABEL = "Table Name"


def _render_linked_value(value: str) -> str:
    if any(ch in value for ch in ",[]'\"") or value != value.strip():
        quote = "'" if "'" not in value else '"'
        return f"{quote}{value}{quote}"
    return value


def serialize_linked_schema(schema: LinkedSchema, label: str = FEATURE_LABEL) -> str:
    lines = []
    for t in schema.tables:
        if any(c.values for c in t.columns):
            cols = ", ".join(
                f"Column: {c.name}, Values: [{', '.join(map(_render_linked_value, c.values))}]"
                if c.values else f"Column: {c.name}"
                for c in t.columns
            )
            lines.append(f"{label}: {t.qualified} , {cols}")
        else:
            lines.append(f"{label}: {t.qualified} , Columns: {', '.join(t.column_names())}")
    return "\n".join(lines)


_TABLE_MARKER = re.compile(r"(Mapping Table|Table Name)\s*:")
_TABLE_IDENT = re.compile(r"^[A-Za-z_][\w$]*(\.[A-Za-z_][\w$]*)?$")


def _block_end(text: str, start: int) -> int:
    ends = [len(text)]
    m = _TABLE_MARKER.search(text, start)
    if m:
        ends.append(m.start())
    for pat in (r"\n\s*\[", r"\n\s*<", r"\[Schema Guideline\]"):
        m = re.compile(pat).search(text, start)
        if m:
            ends.append(m.start())
    return min(ends)


def _parse_value_list(text: str) -> tuple[str, ...]:
    inner = text.strip()
    if not (inner.startswith("[") and inner.endswith("]")):
        raise MalformedResponse(f"malformed value list {text[:60]!r}")
    items = [v.strip() for v in _split_top(inner[1:-1], ",")]
    out = []
    for v in items:
        if len(v) >= 2 and v[0] == v[-1] and v[0] in "'\"":
            v = v[1:-1]
        if v:
            out.append(v)
    return tuple(out)


def _parse_table_block(block: str) -> LinkedTable:
    head, sep, rest = block.partition(",")
    ident = head.strip()
    if not _TABLE_IDENT.match(ident):
        raise MalformedResponse(f"bad table identifier {ident!r}")
    schema, _, name = ident.rpartition(".")
    columns: list[LinkedColumn] = []
    for item in _split_top(rest.replace("\n", " "), ","):
        item = item.strip()
        if not item:
            continue
        item = re.sub(r"^Columns?\s*:\s*", "", item)
        if item.startswith("Values"):
            if not columns:
                raise MalformedResponse("values listed before any column")
            values = _parse_value_list(item.split(":", 1)[1] if ":" in item else "")
            columns[-1] = LinkedColumn(columns[-1].name, values)
            continue
        name_part, vsep, vals = item.partition("Values:")
        col = re.split(r"[\s(]", name_part.strip(), maxsplit=1)[0].strip()
        if not _IDENT.match(col):
            raise MalformedResponse(f"bad column name {col!r}")
        columns.append(LinkedColumn(col, _parse_value_list(vals) if vsep else ()))
    if not columns:
        raise MalformedResponse(f"table {ident} lists no columns")
    return LinkedTable(schema or None, name, tuple(columns))


def parse_linked_tables(text: str, labels: Iterable[str] = (MAPPING_LABEL, FEATURE_LABEL)) -> LinkedSchema:
    """All table blocks whose label is in ``labels``, merged by table name."""
    labels = set(labels)
    merged: dict[str, LinkedTable] = {}
    for m in _TABLE_MARKER.finditer(text):
        if m.group(1) not in labels:
            continue
        block = text[m.end():_block_end(text, m.end())]
        table = _parse_table_block(block)
        key = table.name.lower()
        if key in merged:
            prev = merged[key]
            have = {c.name.lower(): i for i, c in enumerate(prev.columns)}
            cols = list(prev.columns)
            for c in table.columns:
                if c.name.lower() in have:
                    i = have[c.name.lower()]
                    if c.values and not cols[i].values:
                        cols[i] = c
                else:
                    have[c.name.lower()] = len(cols)
                    cols.append(c)
            merged[key] = LinkedTable(prev.schema or table.schema, prev.name, tuple(cols))
        else:
            merged[key] = table
    if not merged:
        raise MalformedResponse("no table lines found")
    return LinkedSchema(tuple(merged.values()))


def parse_schema_linking(text: str) -> tuple[LinkedSchema, str]:
    """Linked tables plus the schema guideline text (verbatim, stripped)."""
    if not isinstance(text, str):
        raise MalformedResponse("completion is not text")
    guideline_tag = parse_tagged_section(text, "schema guideline")
    selected = parse_tagged_section(text, "selected schema")
    body = selected if selected is not None else text
    if guideline_tag is not None:
        guideline = guideline_tag
    else:
        marker = text.find("[Schema Guideline]")
        guideline = ""
        if marker >= 0:
            guideline = text[marker + len("[Schema Guideline]"):].lstrip().lstrip(":").strip()
            if selected is None:
                body = text[:marker]
    return parse_linked_tables(body), guideline
