"""Quote-aware helpers for splitting and normalizing SQL text."""

from __future__ import annotations

import re


def split_outside_quotes(text: str, sep: str) -> list[str]:
    """Split ``text`` on ``sep`` wherever it is not inside a quoted literal.

    Single-quoted strings, double-quoted identifiers and ``--``/``/* */``
    comments are opaque. A doubled quote (``''``) inside a literal is an
    escaped quote, not a terminator.
    """
    if not sep:
        raise ValueError("separator must be non-empty")
    parts: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in ("'", '"'):
            i = _skip_quoted(text, i, ch)
            continue
        if text.startswith("--", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
            continue
        if text.startswith("/*", i):
            j = text.find("*/", i + 2)
            i = n if j < 0 else j + 2
            continue
        if text.startswith(sep, i):
            parts.append(text[start:i])
            i += len(sep)
            start = i
            continue
        i += 1
    parts.append(text[start:])
    return parts


def _skip_quoted(text: str, i: int, quote: str) -> int:
    j = i + 1
    n = len(text)
    while j < n:
        if text[j] == quote:
            if j + 1 < n and text[j + 1] == quote:
                j += 2
                continue
            return j + 1
        j += 1
    return n  # unterminated literal swallows the rest


def strip_comments(sql: str) -> str:
    out = []
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        if ch in ("'", '"'):
            j = _skip_quoted(sql, i, ch)
            out.append(sql[i:j])
            i = j
        elif sql.startswith("--", i):
            j = sql.find("\n", i)
            i = n if j < 0 else j
        elif sql.startswith("/*", i):
            j = sql.find("*/", i + 2)
            i = n if j < 0 else j + 2
            out.append(" ")
        else:
            out.append(ch)
            i += 1
    return "".join(out)


_FENCE = re.compile(r"^\s*```[A-Za-z]*\s*\n?|\n?\s*```\s*$")


def strip_code_fences(text: str) -> str:
    """Remove a surrounding markdown fence such as ```sql ... ```."""
    return _FENCE.sub("", text).strip()


def statements(sql: str) -> list[str]:
    return [s.strip() for s in split_outside_quotes(strip_comments(sql), ";") if s.strip()]


def normalize_query(sql: str) -> str:
    """Lowercase, collapse whitespace, drop a trailing semicolon."""
    return re.sub(r"\s+", " ", sql.strip().rstrip(";").strip()).lower()


def quote_ident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'
