from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emrprep.parsing import (
    FEATURE_LABEL,
    MAPPING_LABEL,
    BudgetViolation,
    CandidateTuple,
    ColumnRef,
    ErrorClass,
    LinkedColumn,
    LinkedSchema,
    LinkedTable,
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
    serialize_linked_schema,
    serialize_similarity_map,
)
from emrprep.templates import builtin_library

# -- tagged sections -----------------------------------------------------------


def test_tagged_section_output_block():
    assert parse_tagged_section("<output>\n<correct>\n</output>", "output") == "<correct>"


def test_tagged_section_absent():
    assert parse_tagged_section("no tags at all", "output") is None


def test_tagged_section_unclosed():
    with pytest.raises(MalformedResponse, match="never closed"):
        parse_tagged_section("<SQL queries>\nSELECT 1", "SQL queries")


def test_tagged_section_nested_and_stray_close():
    with pytest.raises(MalformedResponse, match="nested"):
        parse_tagged_section("<a> <a> x </a> </a>", "a")
    with pytest.raises(MalformedResponse):
        parse_tagged_section("text </a>", "a")


def test_tagged_section_first_pair_wins():
    assert parse_tagged_section("<a>1</a><a>2</a>", "a") == "1"


def test_tagged_document_and_removal():
    raw = "<think>hmm</think>\n<output><No info></output>"
    doc = TaggedDocument.parse(raw, ["think", "output", "missing"])
    assert doc.sections == {"think": "hmm", "output": "<No info>"}
    assert remove_tagged_section(raw, "think").strip() == "<output><No info></output>"


# -- classification tokens ---------------------------------------------------


def test_classification_tokens():
    allowed = ["need more information", "correct"]
    assert parse_classification("<correct>", allowed) == "correct"
    assert parse_classification("  < Need   More information >\n", allowed) == "need more information"
    assert parse_classification("<Add info>", ["Add info", "No info"]) == "Add info"


@pytest.mark.parametrize("section", ["<correct> <need more information>", "", "correct", None])
def test_classification_ambiguous_or_missing(section):
    with pytest.raises(MalformedResponse):
        parse_classification(section, ["need more information", "correct"])


def test_classification_needs_allowed_tokens():
    with pytest.raises(ValueError):
        parse_classification("<x>", [])


def test_error_class():
    assert parse_error_class("<syntax error>") is ErrorClass.SYNTAX_ERROR
    assert parse_error_class("<wrong schema>") is ErrorClass.WRONG_SCHEMA
    for bad in ("", "<syntax error> or <wrong schema>", "<other>"):
        with pytest.raises(MalformedResponse):
            parse_error_class(bad)


# -- SQL lists ---------------------------------------------------------------


def test_sql_queries_split():
    assert parse_sql_queries("SELECT a FROM t || SELECT b FROM u", 5) == ["SELECT a FROM t", "SELECT b FROM u"]
    assert parse_sql_queries("SELECT 1", 5) == ["SELECT 1"]


def test_sql_separator_inside_literal_is_kept():
    q = "SELECT 'a||b' AS x FROM t WHERE name = 'x || y'"
    assert parse_sql_queries(q, 5) == [q]
    assert parse_sql_queries(f"{q} || SELECT 2", 5) == [q, "SELECT 2"]


def test_sql_separator_inside_identifier_and_escaped_quote():
    q = "SELECT \"odd||name\", 'it''s || fine' FROM t"
    assert parse_sql_queries(q, 1) == [q]


def test_sql_queries_trim_and_drop_empties():
    assert parse_sql_queries("  SELECT 1; ||  || SELECT 2 ;", 5) == ["SELECT 1", "SELECT 2"]
    assert parse_sql_queries("```sql\nSELECT 1 || SELECT 2\n```", 5) == ["SELECT 1", "SELECT 2"]


def test_sql_queries_budget():
    six = " || ".join(f"SELECT {i}" for i in range(6))
    with pytest.raises(BudgetViolation) as err:
        parse_sql_queries(six, 5)
    assert len(err.value.queries) == 6 and err.value.limit == 5
    assert isinstance(err.value, MalformedResponse)


def test_sql_query_single_statement():
    assert parse_sql_query("```sql\nSELECT 1;\n```") == "SELECT 1"
    assert parse_sql_query("SELECT ';' AS semi") == "SELECT ';' AS semi"
    with pytest.raises(MalformedResponse):
        parse_sql_query("SELECT 1; SELECT 2")
    with pytest.raises(MalformedResponse):
        parse_sql_query(None)


@settings(max_examples=200)
@given(st.lists(st.text(alphabet="ab|' ;x", max_size=12), min_size=1, max_size=5))
def test_quoted_payloads_never_split(payloads):
    queries = []
    for i, p in enumerate(payloads):
        lit = "'" + p.replace("'", "''") + "'"
        queries.append(f"SELECT {lit} AS c{i}")
    assert parse_sql_queries(" || ".join(queries), 5) == queries


# -- similarity maps -----------------------------------------------------------


def test_similarity_example_one():
    smap = parse_similarity_map("CRP: {('C-reactive protein',): 99|| ('SBP',): 3}")
    assert list(smap) == ["CRP"]
    assert [(c.name, s) for c, s in smap["CRP"]] == [("C-reactive protein", 99), ("SBP", 3)]
    assert smap["CRP"][0][0].arity == 1 and smap["CRP"][0][0].code is None


def test_similarity_example_two():
    smap = parse_similarity_map("Heart Rate: {('Pulse',): 95}")
    assert smap == {"Heart Rate": [(CandidateTuple(None, "Pulse", None, 1), 95)]}


def test_similarity_example_three_name_unit():
    smap = parse_similarity_map(
        "SBP: {('Systolic Blood Pressure', 'mmHg'): 98 || ('Diastolic Blood Pressure', 'mmHg'): 60}")
    (first, s1), (_, s2) = smap["SBP"]
    assert (first.name, first.unit, first.code, s1, s2) == ("Systolic Blood Pressure", "mmHg", None, 98, 60)


def test_similarity_examples_from_shipped_prompt():
    body = builtin_library().get("cma_matching_second").body
    lines = [ln.split("[Similarity Probabilities]:", 1)[1] for ln in body.splitlines()
             if ln.startswith("[Similarity Probabilities]:") and "{" in ln]
    assert len(lines) == 3
    for ln in lines:
        smap = parse_similarity_map(ln)
        assert len(smap) == 1 and all(0 <= s <= 100 for pairs in smap.values() for _, s in pairs)


def test_similarity_coded_tuples_and_multiple_features():
    smap = parse_similarity_map("Glucose: {(656, 'Glukose (BGA)', 'mg/dl'): 97 || (348, 'Glukose (ZL)'): 95}; "
                                "HR: {('211', 'Heart Rate', 'bpm'): 99}")
    g = smap["Glucose"]
    assert g[0][0] == CandidateTuple("656", "Glukose (BGA)", "mg/dl")
    assert g[1][0].code == "348" and g[1][0].unit is None
    assert smap["HR"][0][0].code == "211"


def test_similarity_names_with_separators():
    smap = parse_similarity_map("X: {('a: b; c || d', 'u'): 50}")
    assert smap["X"][0][0].name == "a: b; c || d"


def test_similarity_bare_list_uses_default_feature():
    assert parse_similarity_map("('Pulse',): 95", default_feature="HR") == {
        "HR": [(CandidateTuple(None, "Pulse", None, 1), 95)]}
    with pytest.raises(MalformedResponse):
        parse_similarity_map("('Pulse',): 95")


@pytest.mark.parametrize("text", [
    "CRP: {('a',): 101}",
    "CRP: {('a',): 9.5}",
    "CRP: {('a',): high}",
    "CRP: {('a',): -1}",
    "CRP: {('a',): 5 || ('a',): 6}",
    "CRP: {('a',)}",
    "CRP: {('a',): 5",
    "CRP {('a',): 5}",
    "CRP: {(1, 2, 3, 4): 5}",
    "CRP: {('',): 5}",
])
def test_similarity_malformed(text):
    with pytest.raises(MalformedResponse):
        parse_similarity_map(text)


tuples = st.one_of(
    st.builds(lambda n: (n,), st.text(min_size=1, max_size=8).filter(str.strip)),
    st.builds(lambda c, n: (c, n), st.integers(0, 99999), st.text(min_size=1, max_size=8).filter(str.strip)),
    st.builds(lambda c, n, u: (c, n, u), st.integers(0, 99999),
              st.text(min_size=1, max_size=8).filter(str.strip), st.text(min_size=1, max_size=4).filter(str.strip)),
)


@settings(max_examples=200)
@given(st.dictionaries(
    st.text(alphabet="ABCDEFGH rate", min_size=1, max_size=10).map(str.strip).filter(bool),
    st.lists(st.tuples(tuples, st.integers(0, 100)), min_size=1, max_size=4, unique_by=lambda p: p[0]),
    min_size=1, max_size=3))
def test_similarity_round_trip(data):
    smap = {}
    for feature, pairs in data.items():
        seen, entries = set(), []
        for values, score in pairs:
            c = CandidateTuple.from_values(values)
            if c not in seen:
                seen.add(c)
                entries.append((c, score))
        smap[feature] = entries
    again = parse_similarity_map(serialize_similarity_map(smap))
    assert again == smap
    assert parse_similarity_map(serialize_similarity_map(again)) == again


# -- feature column ------------------------------------------------------------


def test_feature_column_examples():
    assert parse_feature_column("eicu.vitalperiodic.temperature") == [
        ColumnRef("eicu", "vitalperiodic", "temperature")]
    assert parse_feature_column("None") is None
    assert parse_feature_column(" none ") is None
    refs = parse_feature_column("eicu.vitalperiodic.systemicsystolic || eicu.vitalaperiodic.noninvasivesystolic")
    assert [r.table_column for r in refs] == ["vitalperiodic.systemicsystolic", "vitalaperiodic.noninvasivesystolic"]


@pytest.mark.parametrize("text", ["a.b", "a.b.c.d", "", "eicu.vital periodic.x", None])
def test_feature_column_malformed(text):
    with pytest.raises(MalformedResponse):
        parse_feature_column(text)


def test_feature_column_both_tag_spellings():
    assert locate_feature_section("<featurecolumn>a.b.c</featurecolumn>") == "a.b.c"
    assert locate_feature_section("<feature column>None</feature column>") == "None"
    assert locate_feature_section("nothing") is None


# -- schema linking ------------------------------------------------------------

MAPPING_COMPLETION = """Mapping Table: mimic.d_items , Columns: itemid, label
Mapping Table: mimic.d_labitems , Columns: itemid, label, fluid
[Schema Guideline]: Use d_items to find chart item codes. Use d_labitems for labs.
"""

FEATURE_COMPLETION = """<selected schema>
Table Name: sicdb.d_references , Column: referenceglobalid,
Values: [656, 348, 2202]
Table Name: sicdb.laboratory , Column: laboratoryid,
Values: [656, 348], Column: laboratoryvalue,
Values: ['1.5', 'a, b']
</selected schema>

<schema guideline>
Lab values live in laboratory keyed by laboratoryid.
</schema guideline>
"""


def test_schema_linking_mapping_format():
    schema, guide = parse_schema_linking(MAPPING_COMPLETION)
    assert schema.table_names() == ["d_items", "d_labitems"]
    assert schema.table("mimic.d_labitems").column_names() == ["itemid", "label", "fluid"]
    assert schema.tables[0].schema == "mimic"
    assert guide == "Use d_items to find chart item codes. Use d_labitems for labs."


def test_schema_linking_selected_schema_with_values():
    schema, guide = parse_schema_linking(FEATURE_COMPLETION)
    assert schema.table_names() == ["d_references", "laboratory"]
    lab = schema.table("laboratory")
    assert lab.columns[0] == LinkedColumn("laboratoryid", ("656", "348"))
    assert lab.columns[1].values == ("1.5", "a, b")
    assert schema.table("d_references").columns[0].values == ("656", "348", "2202")
    assert guide == "Lab values live in laboratory keyed by laboratoryid."


def test_schema_linking_without_tables():
    with pytest.raises(MalformedResponse, match="no table lines"):
        parse_schema_linking("[Schema Guideline]: there is nothing to link")


def test_schema_linking_repeated_table_merges():
    text = "Table Name: db.t , Columns: a, b\nTable Name: db.t , Columns: b, c\n"
    schema = parse_linked_tables(text)
    assert schema.table("t").column_names() == ["a", "b", "c"]


def test_schema_linking_label_filter():
    text = "Mapping Table: db.m , Columns: a\nTable Name: db.f , Columns: b\n"
    assert parse_linked_tables(text, [MAPPING_LABEL]).table_names() == ["m"]
    assert parse_linked_tables(text, [FEATURE_LABEL]).table_names() == ["f"]


idents = st.from_regex(r"[a-z_][a-z0-9_]{0,7}", fullmatch=True)
values = st.text(alphabet="abc 123,'[]-.", min_size=1, max_size=8).map(str.strip).filter(
    lambda v: v and not (v[0] in "'\"" and v[-1] == v[0]) and not ("'" in v and '"' in v))


@settings(max_examples=150)
@given(st.lists(
    st.tuples(idents, st.lists(st.tuples(idents, st.lists(values, max_size=3)), min_size=1, max_size=3,
                               unique_by=lambda c: c[0])),
    min_size=1, max_size=3, unique_by=lambda t: t[0]),
    st.sampled_from([MAPPING_LABEL, FEATURE_LABEL]))
def test_linked_schema_round_trip(tables, label):
    schema = LinkedSchema(tuple(
        LinkedTable("db", name, tuple(LinkedColumn(c, tuple(vs)) for c, vs in cols))
        for name, cols in tables))
    text = serialize_linked_schema(schema, label)
    parsed = parse_linked_tables(text)
    assert parsed == schema
    assert serialize_linked_schema(parsed, label) == text


# -- totality ------------------------------------------------------------------


def test_parsers_are_total_on_random_inputs():
    from fuzzing import run_fuzz

    report = run_fuzz(3000, seed=11)
    assert report.crashes == []
    assert report.parsed > 0 and report.rejected > 0
