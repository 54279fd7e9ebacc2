"""
Command Line Interface for deferloop.
"""

import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import polars as pl
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from deferloop.config import RunConfig, load_config
from deferloop.exceptions import ConfigError, NumericError
from deferloop.experiments import deferral_map, make_dataset, run_experiment, run_sweep
from deferloop.export import DataExporter
from deferloop.manifest import RunManifest
from deferloop.theoryprobe import run_probe
from deferloop.utils import SeedStreams, load_settings_from_env, resolve_seed

app = typer.Typer(help="deferloop CLI - simulate closed deferral pipelines from the command line.")
console = Console()
err_console = Console(stderr=True)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_BOUND = 5

ConfigOption = typer.Option(..., "--config", "-c", help="TOML run config")
SeedOption = typer.Option(None, "--seed", help="Global seed (overrides env and config)")
OutOption = typer.Option(None, "--out", help="Output directory")
QuietOption = typer.Option(False, "--quiet", "-q", help="Only log warnings and errors")


def _setup_logging(quiet: bool) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


@contextmanager
def _exit_codes(action: str) -> Iterator[None]:
    """Map library errors onto the CLI exit codes."""
    try:
        yield
    except ConfigError as e:
        err_console.print(f"[red]Error {action}: {e}[/red]")
        raise typer.Exit(code=EXIT_CONFIG)
    except NumericError as e:
        err_console.print(f"[red]Numeric failure {action}: {e}[/red]")
        raise typer.Exit(code=EXIT_NUMERIC)
    except OSError as e:
        err_console.print(f"[red]I/O error {action}: {e}[/red]")
        raise typer.Exit(code=EXIT_IO)


def _resolve(config_path: Path, seed: Optional[int], out: Optional[Path]) -> Tuple[RunConfig, int, Path]:
    """Load the config and apply seed / output-directory precedence."""
    with _exit_codes("loading config"):
        config = load_config(config_path)
        seed = resolve_seed(seed, config.seed)
        env_out = load_settings_from_env().get("out_dir")
    out_dir = out if out is not None else Path(env_out or config.out_dir)
    return config, seed, out_dir


def _start(command: str, config: RunConfig, seed: int, out_dir: Path) -> RunManifest:
    """Create the output directory and write the manifest before any result."""
    manifest = RunManifest.start(command, config.model_dump(), seed)
    with _exit_codes("preparing output directory"):
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest.write(out_dir)
    return manifest


def _finish(manifest: RunManifest, out_dir: Path) -> None:
    manifest.finish()
    with _exit_codes("writing manifest"):
        manifest.write(out_dir)


def _metrics_table(title: str, row: Dict[str, float]) -> Table:
    table = Table(title=title)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="green")
    for key, value in row.items():
        table.add_row(key, f"{value:.4f}")
    return table


@app.command("gen-data")
def gen_data(
    config_path: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    quiet: bool = QuietOption,
):
    """Generate the task's dataset file."""
    _setup_logging(quiet)
    config, seed, out_dir = _resolve(config_path, seed, out)
    manifest = _start("gen-data", config, seed, out_dir)
    with _exit_codes("generating data"):
        dataset = make_dataset(config, SeedStreams(seed))
        path = out_dir / "dataset.csv"
        DataExporter().to_csv(dataset.to_frame(), path)
        manifest.add_output("dataset", path)
    _finish(manifest, out_dir)
    console.print(f"Wrote {len(dataset)} samples to {path}")


@app.command()
def run(
    config_path: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    quiet: bool = QuietOption,
):
    """Train and evaluate one algorithm; write trace, summary and checkpoints."""
    _setup_logging(quiet)
    config, seed, out_dir = _resolve(config_path, seed, out)
    manifest = _start("run", config, seed, out_dir)
    exporter = DataExporter()
    with _exit_codes("running experiment"):
        result = run_experiment(config, seed)
        metrics = result.metrics

        if result.state is not None:
            trace_path = out_dir / "trace.csv"
            exporter.to_csv(result.trace, trace_path)
            manifest.add_output("trace", trace_path)

            map_path = out_dir / "deferral_map.csv"
            exporter.to_csv(deferral_map(result.state, result.test, result.prior, result.mu), map_path)
            manifest.add_output("deferral_map", map_path)

            deferrer_path = out_dir / "deferrer.txt"
            exporter.to_checkpoint(result.state.deferrer, deferrer_path)
            manifest.add_output("deferrer", deferrer_path)
            net = getattr(result.state.classifier, "net", None)
            if net is not None:
                classifier_path = out_dir / "classifier.txt"
                exporter.to_checkpoint(net, classifier_path)
                manifest.add_output("classifier", classifier_path)

        summary = {
            "task": config.task,
            "algorithm": config.algorithm,
            "seed": seed,
            "metrics": metrics.to_dict(),
            "flat": metrics.flat(),
        }
        summary_path = out_dir / "summary.json"
        exporter.to_json(summary, summary_path)
        manifest.add_output("summary", summary_path)
    _finish(manifest, out_dir)

    if not quiet:
        console.print(_metrics_table(f"{config.algorithm} on {config.task}", metrics.flat()))


@app.command()
def sweep(
    config_path: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    quiet: bool = QuietOption,
):
    """Run the [sweep] grid with repetitions; write per-run and summary tables."""
    _setup_logging(quiet)
    config, seed, out_dir = _resolve(config_path, seed, out)
    if seed != config.seed:
        config = config.model_copy(update={"seed": seed})
    manifest = _start("sweep", config, seed, out_dir)
    exporter = DataExporter()
    with _exit_codes("running sweep"):
        workers = load_settings_from_env().get("workers")
        result = run_sweep(config, workers=workers)
        for name, frame in (("runs", result.runs), ("summary", result.summary)):
            path = out_dir / f"sweep_{name}.csv"
            exporter.to_csv(frame, path)
            manifest.add_output(f"sweep_{name}", path)
        json_path = out_dir / "sweep_summary.json"
        exporter.to_json(
            {"rows": result.summary.to_dicts(), "spearman_disparity": result.spearman}, json_path
        )
        manifest.add_output("sweep_json", json_path)
    _finish(manifest, out_dir)
    if not quiet:
        console.print(result.summary)


def _parse_params(pairs: List[str]) -> Dict[str, Any]:
    params: Dict[str, Any] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            err_console.print(f"[red]Error: expected key=value, got '{pair}'[/red]")
            raise typer.Exit(code=EXIT_CONFIG)
        params[key.strip()] = value.strip()
    return params


@app.command()
def probe(
    name: str = typer.Argument(..., help="claim1, remark2, theorem1 or theorem2"),
    param: List[str] = typer.Option([], "--param", "-p", help="Probe parameter as key=value"),
    config_path: Optional[Path] = typer.Option(None, "--config", "-c", help="TOML run config"),
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    quiet: bool = QuietOption,
):
    """Run a weight-dynamics probe; exit 5 when the bound is violated."""
    _setup_logging(quiet)
    params: Dict[str, Any] = {}
    configured_seed = 0
    if config_path is not None:
        config, configured_seed, _ = _resolve(config_path, seed, out)
        params.update(config.theoryprobe.params)
    params.update(_parse_params(param))
    with _exit_codes("running probe"):
        seed = resolve_seed(seed, configured_seed)
        result = run_probe(name, params, SeedStreams(seed).generator("probes"))
        payload = {"seed": seed, **result.to_dict()}
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            DataExporter().to_json(payload, out / f"probe_{name}.json")
    typer.echo(json.dumps(payload, indent=2, sort_keys=True))
    if not result.passed:
        err_console.print(f"[yellow]Probe {name} violated its bound[/yellow]")
        raise typer.Exit(code=EXIT_BOUND)


@app.command()
def report(
    directories: List[Path] = typer.Argument(..., help="Run output directories to merge"),
    out: Optional[Path] = typer.Option(None, "--out", help="CSV file for the merged table"),
    quiet: bool = QuietOption,
):
    """Merge run summaries (summary.json files) into one table."""
    _setup_logging(quiet)
    rows = []
    with _exit_codes("reading summaries"):
        for directory in directories:
            for path in sorted(Path(directory).rglob("summary.json")):
                with open(path, encoding="utf-8") as f:
                    try:
                        summary = json.load(f)
                    except json.JSONDecodeError as e:
                        err_console.print(f"[red]I/O error reading summaries: {path}: {e}[/red]")
                        raise typer.Exit(code=EXIT_IO)
                if "flat" not in summary:
                    continue
                rows.append(
                    {
                        "path": str(path.parent),
                        "task": summary.get("task"),
                        "algorithm": summary.get("algorithm"),
                        "seed": summary.get("seed"),
                        **summary["flat"],
                    }
                )
    if not rows:
        err_console.print("[red]Error: no summary.json files found[/red]")
        raise typer.Exit(code=EXIT_CONFIG)
    table = pl.DataFrame(rows, infer_schema_length=None)
    if out is not None:
        with _exit_codes("writing report"):
            out.parent.mkdir(parents=True, exist_ok=True)
            DataExporter().to_csv(table, out)
    if not quiet:
        console.print(table)


if __name__ == "__main__":
    app()
