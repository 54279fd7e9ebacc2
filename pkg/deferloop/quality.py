"""
Data quality checks for dataset files.
"""

from typing import Any, Dict, List, Optional

import polars as pl


class DataValidator:
    """
    Validates raw dataset tables before they become a ``Dataset``.

    Tables are read with every column as text, so each check reports the
    first offending row and the caller can turn it into a file line number.
    """

    def check_columns(self, df: pl.DataFrame, required: List[str]) -> List[str]:
        """
        Return the required columns missing from ``df``.

        Args:
            df: Table to check
            required: Column names that must be present
        """
        return [c for c in required if c not in df.columns]

    def first_failure(self, df: pl.DataFrame, check: pl.Expr) -> Optional[int]:
        """
        Index of the first row where ``check`` is not true (nulls count as failures).

        Returns:
            Zero-based row index, or None when every row passes
        """
        passed = df.select(check.fill_null(False).alias("ok"))["ok"]
        failed = (~passed).arg_true()
        return int(failed[0]) if len(failed) else None

    def first_non_numeric(self, df: pl.DataFrame, column: str) -> Optional[int]:
        """First row whose value in ``column`` does not parse as a finite float."""
        value = pl.col(column).str.strip_chars().cast(pl.Float64, strict=False)
        return self.first_failure(df, value.is_not_null() & value.is_finite())

    def validate(self, df: pl.DataFrame, checks: Dict[str, pl.Expr]) -> Dict[str, Any]:
        """
        Run a suite of named row-level checks.

        Args:
            df: Table to validate
            checks: Name -> Polars expression that must be true on every row

        Returns:
            Dictionary with ``passed`` and, per failed check, its first failing row
        """
        results: Dict[str, Any] = {"passed": True, "failures": {}}
        for name, check in checks.items():
            row = self.first_failure(df, check)
            if row is not None:
                results["passed"] = False
                results["failures"][name] = row
        return results
