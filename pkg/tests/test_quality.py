"""
Unit tests for Data Quality
"""

import polars as pl

from deferloop.quality import DataValidator


def test_check_columns():
    """Test reporting missing columns"""
    df = pl.DataFrame({"id": [1], "f1": [0.5]})
    assert DataValidator().check_columns(df, ["id", "group", "label"]) == ["group", "label"]


def test_first_non_numeric():
    """Test text columns are scanned for the first bad float"""
    validator = DataValidator()
    df = pl.DataFrame({"f1": ["1.0", " 2.5 ", "x", "inf"], "f2": ["0", "1", "2", "3"]})
    assert validator.first_non_numeric(df, "f1") == 2
    assert validator.first_non_numeric(df, "f2") is None
    assert validator.first_non_numeric(pl.DataFrame({"f": ["1", "nan"]}), "f") == 1


def test_validate_checks():
    """Test named checks report their first failing row"""
    validator = DataValidator()
    df = pl.DataFrame({"label": ["0", "1", "2", "1"], "group": ["a", None, "b", "a"]})

    results = validator.validate(
        df,
        {
            "label": pl.col("label").is_in(["0", "1"]),
            "group": pl.col("group").is_not_null(),
        },
    )
    assert results["passed"] is False
    assert results["failures"] == {"label": 2, "group": 1}

    results = validator.validate(df.head(1), {"label": pl.col("label").is_in(["0", "1"])})
    assert results["passed"] is True
    assert results["failures"] == {}
