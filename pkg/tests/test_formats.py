from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from emrprep.formats import (
    FeatureFormatSpec,
    FeatureKind,
    normalize_value,
    validate_feature_formats,
    value_matches,
)

K = FeatureKind


@pytest.mark.parametrize("kind,value,ok", [
    (K.IDENTIFIER, 12, True), (K.IDENTIFIER, "s-1", True), (K.IDENTIFIER, " ", False), (K.IDENTIFIER, True, False),
    (K.GENDER, "Male", True), (K.GENDER, "M", False), (K.GENDER, "male", False),
    (K.MORTALITY, "Dead", True), (K.MORTALITY, 1, False),
    (K.INTEGER, 64, True), (K.INTEGER, "-3", True), (K.INTEGER, 64.0, False), (K.INTEGER, "6.5", False),
    (K.FLOAT4, 1.2345, True), (K.FLOAT4, 1.23456, False), (K.FLOAT4, "2.5", True), (K.FLOAT4, float("nan"), False),
    (K.FLOAT4, None, False),
])
def test_value_matches(kind, value, ok):
    assert value_matches(kind, value) is ok


def test_normalize_value():
    assert normalize_value(K.INTEGER, " 7 ") == 7
    assert normalize_value(K.INTEGER, "x") == ("<invalid>", "x")
    assert normalize_value(K.FLOAT4, "1.23456") == 1.2346
    assert normalize_value(K.IDENTIFIER, 5) == "5"


def test_request_text_round_trip():
    text = ("ICU-stay id, gender (Male/Female/Unknown), age (integer), "
            "length of stay (hours, rounded to 4 decimals in float format), mortality (Dead/Alive/Unknown)")
    spec = FeatureFormatSpec.from_request_text(text)
    assert spec.kinds == [K.IDENTIFIER, K.GENDER, K.INTEGER, K.FLOAT4, K.MORTALITY]
    assert spec.to_request_text() == text
    with pytest.raises(ValueError):
        FeatureFormatSpec.from_request_text("id, height (centimetres)")
    with pytest.raises(ValueError):
        FeatureFormatSpec.of(("age", K.INTEGER))


def test_validation_reports_bad_values():
    spec = FeatureFormatSpec.of(("id", K.IDENTIFIER), ("gender", K.GENDER), ("age", K.INTEGER))
    checks = validate_feature_formats([(1, "Male", 60), (2, "F", 61), (3, "Female", "x")], spec)
    assert [c.passed for c in checks] == [True, False, False]
    assert checks[1].bad_values == ("F",) and checks[2].bad_values == ("x",)
    with pytest.raises(ValueError):
        validate_feature_formats([(1, "Male")], spec)


@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6))
def test_rounded_floats_always_match(x):
    assert value_matches(K.FLOAT4, round(x, 4))
    assert normalize_value(K.FLOAT4, round(x, 4)) == round(x, 4)
