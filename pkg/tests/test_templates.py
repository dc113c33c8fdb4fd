from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emrprep.templates import (
    DocumentBundle,
    PromptTemplate,
    TemplateError,
    TemplateLibrary,
    builtin_library,
    load_documents,
    render,
    required_bindings,
)

GOLDEN = Path(__file__).parent / "data" / "golden" / "prompts"
ALL_IDS = builtin_library().ids()


def scan_placeholders(body: str) -> set[str]:
    """Independent extraction: ``{Name}`` where Name is a letter then word characters."""
    found, i = set(), 0
    while i < len(body):
        if body[i] == "{":
            j = i + 1
            while j < len(body) and (body[j].isalnum() or body[j] == "_"):
                j += 1
            name = body[i + 1:j]
            if j < len(body) and body[j] == "}" and name and name[0].isalpha():
                found.add(name)
            i = j
        else:
            i += 1
    return found


def sentinels(template_id: str) -> dict[str, str]:
    return {n: f"<<{n}>>" for n in required_bindings(template_id)}


def test_every_template_is_shipped():
    assert len(ALL_IDS) == 14
    assert {i.split("_")[0] for i in ALL_IDS} == {"cfsa", "cma", "integration"}


@pytest.mark.parametrize("template_id", ALL_IDS)
def test_required_bindings_match_independent_scan(template_id):
    body = builtin_library().get(template_id).body
    assert required_bindings(template_id) == scan_placeholders(body)


@pytest.mark.parametrize("template_id", ALL_IDS)
def test_render_matches_golden_file(template_id):
    expected = (GOLDEN / f"{template_id}.txt").read_text(encoding="utf-8")
    assert render(template_id, sentinels(template_id)) == expected


@pytest.mark.parametrize("template_id", ALL_IDS)
def test_fixed_lines_survive_rendering(template_id):
    body = builtin_library().get(template_id).body
    out = render(template_id, sentinels(template_id))
    fixed = [ln for ln in body.splitlines() if ln.strip() and not scan_placeholders(ln)]
    assert fixed
    for line in fixed:
        assert line in out
    assert not scan_placeholders(out) - {n for n in scan_placeholders(body)}
    for name in required_bindings(template_id):
        assert "{" + name + "}" not in out


def test_mapping_linking_prompt_carries_instruction():
    out = render("cfsa_schema_linking_mapping", sentinels("cfsa_schema_linking_mapping"))
    assert "select all schema that are necessary" in out
    assert len(required_bindings("cfsa_schema_linking_mapping")) == 5


def test_sufficiency_bindings():
    assert {
        "Original_Schema", "Selected_Schema", "Target_Features", "Cohort_Selection",
        "Mapping_Table", "Foreign_Key", "Previous_Observation", "Error_Feedback",
    } <= required_bindings("cfsa_sql_sufficiency")


def test_threshold_line_rendered():
    b = sentinels("cma_matching_second")
    b["User_defined_threshold"] = "90"
    assert "[Threshold]:90" in render("cma_matching_second", b)


def test_empty_memo_leaves_no_residue():
    b = sentinels("cfsa_schema_linking_feature")
    b["Evaluation_Memo"] = ""
    out = render("cfsa_schema_linking_feature", b)
    assert "{Evaluation_Memo}" not in out
    assert "<<Evaluation_Memo>>" not in out


def test_missing_binding_lists_names():
    b = sentinels("cma_feature_locating")
    del b["Target_Feature"], b["Schema_Guideline"]
    with pytest.raises(TemplateError) as err:
        render("cma_feature_locating", b)
    assert "Schema_Guideline" in str(err.value) and "Target_Feature" in str(err.value)


def test_unknown_template():
    with pytest.raises(TemplateError, match="unknown template"):
        render("no_such_prompt", {})
    with pytest.raises(TemplateError):
        required_bindings("no_such_prompt")


def test_template_without_placeholders():
    t = PromptTemplate("plain", "no bindings here, {not a binding} either")
    assert t.required_bindings == frozenset()
    assert t.render({}) == t.body


def test_bound_values_are_not_rescanned():
    t = PromptTemplate("t", "A {X} B {Y}")
    assert t.render({"X": "{Y}", "Y": "  keep  spacing\n"}) == "A {Y} B   keep  spacing\n"


def test_library_from_directory(tmp_path):
    (tmp_path / "cfsa").mkdir()
    (tmp_path / "cfsa" / "one.txt").write_text("{A} and {B}", encoding="utf-8")
    (tmp_path / "integration.txt").write_text("{C}", encoding="utf-8")
    lib = TemplateLibrary.from_directory(tmp_path)
    assert lib.ids() == ["cfsa_one", "integration"]
    assert lib.required_bindings("cfsa_one") == {"A", "B"}


@settings(max_examples=60)
@given(st.sampled_from(ALL_IDS), st.data())
def test_render_is_injective_in_each_binding(template_id, data):
    names = sorted(required_bindings(template_id))
    if not names:
        return
    name = data.draw(st.sampled_from(names))
    a = data.draw(st.text(min_size=0, max_size=20))
    b = data.draw(st.text(min_size=0, max_size=20).filter(lambda s: s != a))
    base = sentinels(template_id)
    assert render(template_id, {**base, name: a}) != render(template_id, {**base, name: b})


def test_load_documents(tmp_path):
    manual = tmp_path / "manual.txt"
    memo = tmp_path / "memo.txt"
    manual.write_bytes(b"line one\r\nline two\r\n")
    memo.write_bytes(b"memo\rold mac\n")
    bundle = load_documents(manual, memo)
    assert bundle.database_manual == "line one\nline two\n"
    assert bundle.evaluation_memo == "memo\nold mac\n"
    assert load_documents(manual, None) == DocumentBundle("line one\nline two\n", "")
    with pytest.raises(FileNotFoundError):
        load_documents(tmp_path / "missing.txt", None)
