"""Read-only access to a relational EMR database.

Sessions wrap either an embedded SQLite file (attached under a schema name so
``schema.table`` references work) or a PostgreSQL endpoint. Every statement
is screened before dispatch; on SQLite an authorizer additionally denies any
write that slips through, and counts it in ``Session.blocked_writes``.
"""

from __future__ import annotations

import json
import logging
import re
import sqlite3
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterator, Sequence
from urllib.parse import parse_qs, urlparse

from .formats import FeatureFormatSpec, validate_feature_formats
from .sqltext import quote_ident, statements, strip_comments

log = logging.getLogger(__name__)

DEFAULT_ROW_CAP = 20
DEFAULT_SAMPLES = 10
NULL_TOKEN = "NULL"

_READ_PREFIXES = ("select", "with", "values")
_WRITE_KEYWORDS = frozenset((
    "insert", "update", "delete", "replace", "upsert", "merge", "create", "drop", "alter", "truncate",
    "attach", "detach", "pragma", "vacuum", "reindex", "analyze", "begin", "commit", "rollback",
    "savepoint", "release", "grant", "revoke", "copy", "set", "reset", "lock", "call", "do", "execute",
))
_MAPPING_HINT = re.compile(r"^(d_|def_|dict_)|(_def|_dict|items|references|_lookup)$", re.I)


class DatabaseConnectionError(ConnectionError):
    pass


class ReadOnlyViolation(PermissionError):
    pass


class IntrospectionError(RuntimeError):
    pass


class QueryExecutionError(RuntimeError):
    """Backend failure; ``message`` is the backend's text, unmodified."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


# -- schema snapshot ---------------------------------------------------------


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    declared_type: str
    sample_values: tuple[str, ...] = ()


@dataclass(frozen=True)
class TableInfo:
    name: str
    columns: tuple[ColumnInfo, ...]

    def column(self, name: str) -> ColumnInfo | None:
        for c in self.columns:
            if c.name.lower() == name.lower():
                return c
        return None


@dataclass(frozen=True)
class ForeignKey:
    from_table: str
    from_column: str
    to_table: str
    to_column: str

    def render(self) -> str:
        return f"{self.from_table}.{self.from_column} -> {self.to_table}.{self.to_column}"


@dataclass(frozen=True)
class SchemaSnapshot:
    database_name: str
    tables: tuple[TableInfo, ...]
    foreign_keys: tuple[ForeignKey, ...] = ()
    mapping_table_hints: tuple[str, ...] = ()
    samples_per_column: int = DEFAULT_SAMPLES

    def table(self, name: str) -> TableInfo | None:
        name = name.split(".")[-1].lower()
        for t in self.tables:
            if t.name.lower() == name:
                return t
        return None

    def has_column(self, table: str, column: str) -> bool:
        t = self.table(table)
        return t is not None and t.column(column) is not None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SchemaSnapshot":
        raw = json.loads(text)
        return cls(
            database_name=raw["database_name"],
            tables=tuple(
                TableInfo(
                    t["name"],
                    tuple(
                        ColumnInfo(c["name"], c["declared_type"], tuple(c["sample_values"]))
                        for c in t["columns"]
                    ),
                )
                for t in raw["tables"]
            ),
            foreign_keys=tuple(ForeignKey(**fk) for fk in raw["foreign_keys"]),
            mapping_table_hints=tuple(raw["mapping_table_hints"]),
            samples_per_column=raw["samples_per_column"],
        )

    def limited(self, samples: int) -> "SchemaSnapshot":
        """Copy with at most ``samples`` values per column (prompt size control)."""
        return SchemaSnapshot(
            self.database_name,
            tuple(
                TableInfo(t.name, tuple(
                    ColumnInfo(c.name, c.declared_type, c.sample_values[:samples])
                    for c in t.columns
                ))
                for t in self.tables
            ),
            self.foreign_keys,
            self.mapping_table_hints,
            min(samples, self.samples_per_column),
        )


def render_snapshot(snapshot: SchemaSnapshot) -> str:
    """Text form of a snapshot for the schema-information prompt slots."""
    lines = []
    db = snapshot.database_name
    for t in snapshot.tables:
        cols = ", ".join(
            f"{c.name} ({c.declared_type}) Values: [{', '.join(c.sample_values)}]"
            for c in t.columns
        )
        lines.append(f"Table Name: {db}.{t.name} , Columns: {cols}")
    if snapshot.foreign_keys:
        lines.append("[Foreign Key]: " + "; ".join(fk.render() for fk in snapshot.foreign_keys))
    if snapshot.mapping_table_hints:
        lines.append(
            "[Mapping Table]: " + ", ".join(f"{db}.{t}" for t in snapshot.mapping_table_hints)
        )
    return "\n".join(lines)


def render_foreign_keys(snapshot: SchemaSnapshot) -> str:
    return "; ".join(fk.render() for fk in snapshot.foreign_keys) or "None"


def render_value(value: Any) -> str:
    return NULL_TOKEN if value is None else str(value)


# -- query results and their classification ----------------------------------


@dataclass(frozen=True)
class QueryResult:
    columns: tuple[str, ...]
    rows: tuple[tuple[Any, ...], ...]
    truncated: bool = False
    row_cap_applied: int | None = None

    def render(self) -> str:
        return repr([tuple(render_value(v) for v in r) for r in self.rows])


class ResultStatus:
    """Base of the five result classifications."""

    def describe(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Correct(ResultStatus):
    def describe(self) -> str:
        return "correct"


@dataclass(frozen=True)
class EmptyOutput(ResultStatus):
    def describe(self) -> str:
        return "The query executed successfully but returned no rows."


@dataclass(frozen=True)
class ColumnCountMismatch(ResultStatus):
    expected: int
    got: int

    def describe(self) -> str:
        return (
            f"The query returned {self.got} columns but {self.expected} requested "
            f"features were expected."
        )


@dataclass(frozen=True)
class TypeMismatch(ResultStatus):
    column: str
    expected_kind: str
    examples: tuple[Any, ...] = ()

    def describe(self) -> str:
        shown = ", ".join(render_value(v) for v in self.examples)
        return (
            f"Column '{self.column}' has values that do not match the requested format "
            f"{self.expected_kind} (e.g. {shown})."
        )


@dataclass(frozen=True)
class ExecutionError(ResultStatus):
    message: str

    def describe(self) -> str:
        return self.message


def classify_result(
    result: QueryResult | ExecutionError, expected_format: FeatureFormatSpec
) -> ResultStatus:
    if isinstance(result, ExecutionError):
        return result
    if not result.rows:
        return EmptyOutput()
    if len(result.columns) != expected_format.feature_count:
        return ColumnCountMismatch(expected_format.feature_count, len(result.columns))
    for check in validate_feature_formats(result.rows, expected_format):
        if not check.passed:
            kind = "enumeration" if check.kind.is_enum else check.kind.value
            return TypeMismatch(check.name, kind, check.bad_values)
    return Correct()


# -- sessions ----------------------------------------------------------------


def check_read_only(sql: str) -> str:
    """Return the single statement in ``sql`` or raise ReadOnlyViolation."""
    stmts = statements(sql)
    if len(stmts) != 1:
        raise ReadOnlyViolation(f"expected exactly one statement, got {len(stmts)}")
    head = strip_comments(stmts[0]).lstrip().split(None, 1)
    word = head[0].lower().lstrip("(") if head else ""
    if word in _READ_PREFIXES:
        return stmts[0]
    if word in _WRITE_KEYWORDS:
        raise ReadOnlyViolation(f"only SELECT statements are allowed: {stmts[0][:60]!r}")
    raise ReadOnlyViolation(f"syntax error near {head[0][:30]!r}: a statement must start with SELECT, WITH or VALUES")


class Session:
    """Common interface; use :func:`connect` to obtain one."""

    database_name: str
    blocked_writes: int = 0

    def cursor_rows(self, sql: str, params: Sequence[Any] = ()) -> tuple[list[str], Iterator[tuple]]:
        raise NotImplementedError

    def list_tables(self) -> list[str]:
        raise NotImplementedError

    def table_columns(self, table: str) -> list[tuple[str, str, bool]]:
        """(name, declared type, is primary key) in declaration order."""
        raise NotImplementedError

    def foreign_keys(self, table: str) -> list[ForeignKey]:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def qualified(self, table: str) -> str:
        return f"{quote_ident(self.database_name)}.{quote_ident(table)}"

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


_SQLITE_ALLOWED = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}
_SQLITE_PRAGMAS = {"table_info", "foreign_key_list", "table_list", "index_list"}


class SQLiteSession(Session):
    def __init__(self, path: Path, schema: str):
        if not path.is_file():
            raise DatabaseConnectionError(f"no database file at {path}")
        self.database_name = schema
        self.path = path
        self.blocked_writes = 0
        self._lock = threading.Lock()
        try:
            self._conn = sqlite3.connect(":memory:", uri=True, check_same_thread=False)
            uri = f"file:{path.resolve()}?mode=ro"
            self._conn.execute(f"ATTACH DATABASE ? AS {quote_ident(schema)}", (uri,))
            self._conn.execute(f"SELECT count(*) FROM {quote_ident(schema)}.sqlite_master")
        except sqlite3.DatabaseError as exc:
            raise DatabaseConnectionError(f"cannot open {path}: {exc}") from exc
        self._conn.set_authorizer(self._authorize)

    def _authorize(self, action, arg1, arg2, dbname, source):
        if action in _SQLITE_ALLOWED:
            return sqlite3.SQLITE_OK
        if action == sqlite3.SQLITE_PRAGMA and arg1 in _SQLITE_PRAGMAS:
            # introspection pragmas only read; arg2 carries the table name
            return sqlite3.SQLITE_OK
        self.blocked_writes += 1
        return sqlite3.SQLITE_DENY

    def cursor_rows(self, sql, params=()):
        with self._lock:
            try:
                cur = self._conn.execute(sql, params)
                cols = [d[0] for d in cur.description or ()]
                rows = cur.fetchall()
            except sqlite3.Error as exc:
                raise QueryExecutionError(str(exc)) from exc
        return cols, iter(rows)

    def list_tables(self):
        sql = (
            f"SELECT name FROM {quote_ident(self.database_name)}.sqlite_master "
            "WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name"
        )
        return [r[0] for r in _catalog(self, sql)]

    def table_columns(self, table):
        sql = f"PRAGMA {quote_ident(self.database_name)}.table_info({quote_ident(table)})"
        return [(r[1], r[2] or "", bool(r[5])) for r in _catalog(self, sql)]

    def foreign_keys(self, table):
        sql = f"PRAGMA {quote_ident(self.database_name)}.foreign_key_list({quote_ident(table)})"
        return [ForeignKey(table, r[3], r[2], r[4]) for r in _catalog(self, sql)]

    def close(self):
        self._conn.close()


class PostgresSession(Session):
    """psycopg-backed session. The transaction is pinned read-only server-side."""

    def __init__(self, dsn: str, schema: str):
        try:
            import psycopg
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise DatabaseConnectionError(
                "PostgreSQL endpoints need the optional 'psycopg' package"
            ) from exc
        self.database_name = schema
        self.blocked_writes = 0
        self._lock = threading.Lock()
        try:
            self._conn = psycopg.connect(dsn, autocommit=True)
            self._conn.execute("SET default_transaction_read_only = on")
        except psycopg.Error as exc:
            raise DatabaseConnectionError(str(exc)) from exc
        self._error = psycopg.Error

    def cursor_rows(self, sql, params=()):
        with self._lock:
            try:
                cur = self._conn.execute(sql.replace("?", "%s") if params else sql, params or None)
                cols = [d.name for d in cur.description or ()]
                rows = cur.fetchall()
            except self._error as exc:
                raise QueryExecutionError(str(exc).strip()) from exc
        return cols, iter(rows)

    def list_tables(self):
        sql = (
            "SELECT table_name FROM information_schema.tables WHERE table_schema = ? "
            "AND table_type = 'BASE TABLE' ORDER BY table_name"
        )
        return [r[0] for r in _catalog(self, sql, (self.database_name,))]

    def table_columns(self, table):
        sql = (
            "SELECT c.column_name, c.data_type, EXISTS (SELECT 1 FROM "
            "information_schema.key_column_usage k JOIN information_schema.table_constraints tc "
            "ON k.constraint_name = tc.constraint_name AND tc.constraint_type = 'PRIMARY KEY' "
            "WHERE k.table_schema = c.table_schema AND k.table_name = c.table_name "
            "AND k.column_name = c.column_name) FROM information_schema.columns c "
            "WHERE c.table_schema = ? AND c.table_name = ? ORDER BY c.ordinal_position"
        )
        return [(r[0], r[1], bool(r[2])) for r in _catalog(self, sql, (self.database_name, table))]

    def foreign_keys(self, table):
        sql = (
            "SELECT kcu.column_name, ccu.table_name, ccu.column_name FROM "
            "information_schema.table_constraints tc JOIN information_schema.key_column_usage kcu "
            "ON tc.constraint_name = kcu.constraint_name JOIN "
            "information_schema.constraint_column_usage ccu ON ccu.constraint_name = tc.constraint_name "
            "WHERE tc.constraint_type = 'FOREIGN KEY' AND tc.table_schema = ? AND tc.table_name = ?"
        )
        return [ForeignKey(table, r[0], r[1], r[2]) for r in _catalog(self, sql, (self.database_name, table))]

    def close(self):
        self._conn.close()


def _catalog(session: Session, sql: str, params: Sequence[Any] = ()) -> list[tuple]:
    try:
        _, rows = session.cursor_rows(sql, params)
        return list(rows)
    except QueryExecutionError as exc:
        raise IntrospectionError(f"catalog query failed: {sql}: {exc.message}") from exc


def connect(endpoint: str | Path) -> Session:
    """Open a read-only session.

    ``endpoint`` is a SQLite file path, ``sqlite:///path?schema=name`` or a
    ``postgresql://`` URL (``?schema=name`` selects the namespace). The schema
    name defaults to the file stem for SQLite and ``public`` for PostgreSQL.
    """
    text = str(endpoint)
    parsed = urlparse(text)
    if parsed.scheme in ("postgresql", "postgres"):
        schema = parse_qs(parsed.query).get("schema", ["public"])[0]
        dsn = parsed._replace(query="").geturl()
        return PostgresSession(dsn, schema)
    if parsed.scheme == "sqlite":
        path = Path(parsed.path)
        schema = parse_qs(parsed.query).get("schema", [path.stem])[0]
    elif parsed.scheme in ("", "file") or len(parsed.scheme) == 1:
        path = Path(text)
        schema = path.stem
    else:
        raise DatabaseConnectionError(f"unsupported endpoint scheme {parsed.scheme!r}")
    return SQLiteSession(path, schema)


def introspect_schema(session: Session, samples_per_column: int = DEFAULT_SAMPLES) -> SchemaSnapshot:
    """Tables, columns, foreign keys and deterministic per-column samples.

    Samples are the first ``samples_per_column`` distinct values ordered by
    their first occurrence under the primary key (else the first column).
    """
    if samples_per_column < 1:
        raise ValueError("samples_per_column must be >= 1")
    tables, fks, hints = [], [], []
    for name in session.list_tables():
        cols = session.table_columns(name)
        order_col = next((c for c, _, pk in cols if pk), cols[0][0] if cols else None)
        infos = []
        for col, ctype, _ in cols:
            sql = (
                f"SELECT {quote_ident(col)} FROM {session.qualified(name)} "
                f"GROUP BY {quote_ident(col)} ORDER BY MIN({quote_ident(order_col)}) "
                f"LIMIT {int(samples_per_column)}"
            )
            samples = tuple(render_value(r[0]) for r in _catalog(session, sql))
            infos.append(ColumnInfo(col, ctype, samples))
        tables.append(TableInfo(name, tuple(infos)))
        fks.extend(session.foreign_keys(name))
        if _MAPPING_HINT.search(name):
            hints.append(name)
    return SchemaSnapshot(
        session.database_name, tuple(tables), tuple(fks), tuple(hints), samples_per_column
    )


def execute_observation(
    session: Session, query: str, row_cap: int = DEFAULT_ROW_CAP
) -> QueryResult | ExecutionError:
    """Run a probe query; at most ``row_cap`` rows come back.

    Failures, including attempted writes, are returned as ExecutionError
    carrying the verbatim message so agents can feed it back into prompts.
    """
    if row_cap < 1:
        raise ValueError("row_cap must be >= 1")
    try:
        stmt = check_read_only(query)
        cols, rows = session.cursor_rows(stmt)
    except (ReadOnlyViolation, QueryExecutionError) as exc:
        return ExecutionError(getattr(exc, "message", str(exc)))
    kept = []
    truncated = False
    for row in rows:
        if len(kept) == row_cap:
            truncated = True
            break
        kept.append(tuple(row))
    return QueryResult(tuple(cols), tuple(kept), truncated, row_cap)


def execute_final(session: Session, query: str) -> QueryResult:
    """Run the extraction query without a row cap.

    Raises QueryExecutionError with the backend message on failure and
    ReadOnlyViolation for anything other than a single SELECT.
    """
    stmt = check_read_only(query)
    cols, rows = session.cursor_rows(stmt)
    return QueryResult(tuple(cols), tuple(tuple(r) for r in rows), False, None)
