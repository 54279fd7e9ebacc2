"""
Result export: tables, summaries and network checkpoints.
"""

import json
from pathlib import Path
from typing import Any, Dict, Union

import polars as pl

from deferloop.nn import Network, save_network

PathLike = Union[str, Path]


class DataExporter:
    """Handle result export operations"""

    def to_csv(
        self,
        df: pl.DataFrame,
        output_path: PathLike,
        separator: str = ",",
        include_header: bool = True,
    ) -> None:
        """
        Export DataFrame to CSV file.

        Floats are written with full precision so re-runs compare byte for byte.

        Args:
            df: Polars DataFrame to export
            output_path: Path to output file
            separator: Field separator
            include_header: Whether to include header row
        """
        df.write_csv(
            output_path,
            separator=separator,
            include_header=include_header,
        )

    def to_json(self, payload: Dict[str, Any], output_path: PathLike, pretty: bool = True) -> None:
        """
        Export a JSON-ready dictionary.

        Args:
            payload: Plain dict (numbers, strings, lists, dicts)
            output_path: Path to output file
            pretty: Indent the output
        """
        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2 if pretty else None, sort_keys=True)
            f.write("\n")

    def to_checkpoint(self, net: Network, output_path: PathLike) -> None:
        """Write network parameters in the text checkpoint format."""
        save_network(net, output_path)
