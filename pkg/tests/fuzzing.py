"""Random-input driver for the completion parsers.

Every parser must either return a value or raise ``MalformedResponse``.
Inputs mix raw random bytes with mutations of well-formed completions, so
the parsers are pushed past their first few guard clauses.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from emrprep.parsing import (
    MalformedResponse,
    TaggedDocument,
    locate_feature_section,
    parse_classification,
    parse_error_class,
    parse_feature_column,
    parse_linked_tables,
    parse_schema_linking,
    parse_similarity_map,
    parse_sql_queries,
    parse_sql_query,
    parse_tagged_section,
    remove_tagged_section,
)

SEEDS = [
    "<output>\n<correct>\n</output>",
    "<output><need more information></output>",
    "<SQL queries>SELECT 'a||b' FROM t || SELECT \"x\" FROM u</SQL queries>",
    "```sql\nSELECT 1;\n```",
    "CRP: {('C-reactive protein',): 99|| ('SBP',): 3}",
    "Heart Rate: {('Pulse',): 95}",
    "SBP: {('Systolic Blood Pressure', 'mmHg'): 98 || ('Diastolic Blood Pressure', 'mmHg'): 60}",
    "Glucose: {(656, 'Glukose (BGA)', 'mg/dl'): 97}",
    "<featurecolumn>eicu.vitalperiodic.temperature</featurecolumn>",
    "<feature column>None</feature column>",
    "Mapping Table: mimic.d_items , Columns: itemid, label\n[Schema Guideline]: use it",
    "<selected schema>\nTable Name: sicdb.laboratory , Column: laboratoryid,\nValues: [656, 348]\n</selected schema>"
    "<schema guideline>g</schema guideline>",
    "<syntax error>",
    "<wrong schema>",
]
ALPHABET = "<>/{}()[]'\",:;|.\\ \n\t-_=abcSELECTNoneTable NameMapping Columns Values 0123456789`"


def _random_bytes(rng: random.Random) -> str:
    raw = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 80)))
    return raw.decode("utf-8", errors="surrogateescape")


def _random_symbols(rng: random.Random) -> str:
    return "".join(rng.choice(ALPHABET) for _ in range(rng.randrange(0, 60)))


def _mutate(rng: random.Random) -> str:
    chars = list(rng.choice(SEEDS))
    for _ in range(rng.randrange(1, 6)):
        op = rng.randrange(3)
        pos = rng.randrange(len(chars) + 1)
        if op == 0 and chars:
            del chars[min(pos, len(chars) - 1)]
        elif op == 1:
            chars.insert(pos, rng.choice(ALPHABET))
        elif chars:
            a = rng.randrange(len(chars))
            b = rng.randrange(a, min(len(chars), a + 12) + 1)
            chars[pos:pos] = chars[a:b]
    return "".join(chars)


def random_input(rng: random.Random) -> str:
    kind = rng.randrange(3)
    if kind == 0:
        return _random_bytes(rng)
    if kind == 1:
        return _random_symbols(rng)
    return _mutate(rng)


PARSERS = {
    "tagged_section": lambda s: parse_tagged_section(s, "output"),
    "remove_section": lambda s: remove_tagged_section(s, "think"),
    "tagged_document": lambda s: TaggedDocument.parse(s, ["output", "SQL queries", "selected schema"]),
    "classification": lambda s: parse_classification(s, ["correct", "need more information"]),
    "error_class": parse_error_class,
    "sql_queries": lambda s: parse_sql_queries(s, 5),
    "sql_query": parse_sql_query,
    "similarity_map": lambda s: parse_similarity_map(s, default_feature="F"),
    "feature_column": parse_feature_column,
    "locate_feature": locate_feature_section,
    "linked_tables": parse_linked_tables,
    "schema_linking": parse_schema_linking,
}


@dataclass
class FuzzReport:
    inputs: int
    calls: int = 0
    parsed: int = 0
    rejected: int = 0
    crashes: list[tuple[str, str, str]] = field(default_factory=list)
    seconds: float = 0.0


def run_fuzz(n: int, seed: int = 0) -> FuzzReport:
    """Feed ``n`` random inputs to every parser; record anything that is not a clean reject."""
    rng = random.Random(seed)
    report = FuzzReport(n)
    start = time.perf_counter()
    for _ in range(n):
        text = random_input(rng)
        for name, parse in PARSERS.items():
            report.calls += 1
            try:
                parse(text)
                report.parsed += 1
            except MalformedResponse:
                report.rejected += 1
            except Exception as exc:  # noqa: BLE001 - any other exception is the finding
                report.crashes.append((name, text, repr(exc)))
    report.seconds = time.perf_counter() - start
    return report
