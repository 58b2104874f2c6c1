"""
CLI Interface for IMRE
======================

Command-line interface for running the experiment stages one at a time or
end to end.
"""

import sys
from pathlib import Path
from typing import Any, Dict, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from .config import ExperimentConfig, create_default_config_file, load_config
from .errors import StageError
from .logging_config import configure_logging
from .pipeline import PipelineReport, run_pipeline, run_stage
from .stages import StageResult

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BUDGET_CAPPED = 3

app = typer.Typer(help="IMRE - inverse-problem solving with a learned operator-error model")
console = Console()

ConfigOption = typer.Option(None, "--config", help="Flat key=value configuration file")
SeedOption = typer.Option(None, "--seed", help="Base seed for every RNG stream")
OutOption = typer.Option(None, "--out", help="Output directory")


def _load(config: Optional[str], seed: Optional[int], out: Optional[str]) -> ExperimentConfig:
    try:
        cfg = load_config(config, seed=seed, out_dir=out)
    except (FileNotFoundError, ValidationError) as e:
        console.print(f"[red]Invalid configuration: {e}[/red]")
        sys.exit(EXIT_FAILURE)
    configure_logging(cfg.log_level, cfg.log_format, cfg.log_file)
    return cfg


def _print_result(result: StageResult) -> None:
    table = Table(title=f"Stage: {result.stage} ({result.elapsed_s:.1f} s)")
    table.add_column("Key", style="cyan")
    table.add_column("Value", style="green")
    for key, value in result.summary.items():
        table.add_row(key, f"{value:.4g}" if isinstance(value, float) else str(value))
    for key, value in result.outputs.items():
        table.add_row(f"→ {key}", value)
    console.print(table)


def _exit_code(capped: int) -> int:
    if capped:
        console.print(f"[yellow]{capped} case(s) hit the outer-iteration cap without converging[/yellow]")
        return EXIT_BUDGET_CAPPED
    return EXIT_OK


def _single(name: str, config: Optional[str], seed: Optional[int], out: Optional[str]) -> None:
    cfg = _load(config, seed, out)
    try:
        result = run_stage(name, cfg)
    except StageError as e:
        console.print(f"[red]{e}[/red]")
        sys.exit(EXIT_FAILURE)
    _print_result(result)
    sys.exit(_exit_code(result.budget_capped))


@app.command()
def forge(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
          out: Optional[str] = OutOption):
    """Forge the labeled operator-pair dataset."""
    _single("forge", config, seed, out)


@app.command("train-gen")
def train_gen(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
              out: Optional[str] = OutOption):
    """Train the error generator."""
    _single("train-gen", config, seed, out)


@app.command("train-som")
def train_som(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
              out: Optional[str] = OutOption):
    """Train the SOM atlas on latent error codes."""
    _single("train-som", config, seed, out)


@app.command()
def simulate(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
             out: Optional[str] = OutOption):
    """Simulate paced potentials and noisy recordings."""
    _single("simulate", config, seed, out)


@app.command()
def invert(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
           out: Optional[str] = OutOption):
    """Run initial, corrected and oracle inversions for every case."""
    _single("invert", config, seed, out)


@app.command()
def evaluate(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
             out: Optional[str] = OutOption):
    """Write the summary and evaluation reports."""
    _single("evaluate", config, seed, out)


def _print_aggregate(report: PipelineReport) -> None:
    result = report.get("evaluate")
    if result is None or not result.summary.get("cases"):
        return
    summary: Dict[str, Any] = result.summary
    table = Table(title="Inverse solutions (median over cases)")
    table.add_column("Method", style="cyan")
    for column in ("RMSE", "SCC", "TCC"):
        table.add_column(column, style="green")
    for method in ("initial", "imre", "oracle"):
        table.add_row(
            method,
            f"{summary[f'median_rmse_{method}']:.4f}",
            f"{summary[f'median_scc_{method}']:.3f}",
            f"{summary[f'median_tcc_{method}']:.3f}",
        )
    console.print(table)


@app.command("run-all")
def run_all(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
            out: Optional[str] = OutOption):
    """Run every enabled stage end to end."""
    cfg = _load(config, seed, out)
    console.print(Panel(
        f"Output: {cfg.get_out_path()}\n"
        f"Seed: {cfg.seed}\n"
        f"Stages: {', '.join(cfg.stages) or '(none)'}",
        title="IMRE",
        border_style="green",
    ))
    try:
        report = run_pipeline(cfg, on_stage=_print_result)
    except StageError as e:
        console.print(f"[red]{e}[/red]")
        sys.exit(EXIT_FAILURE)
    _print_aggregate(report)
    sys.exit(_exit_code(report.budget_capped))


@app.command()
def init(
    config_path: str = typer.Option("imre.env", help="Path for configuration file"),
    force: bool = typer.Option(False, help="Overwrite existing config file"),
):
    """Write a default configuration file."""
    config_file = Path(config_path)

    if config_file.exists() and not force:
        console.print(f"[yellow]Configuration file already exists at {config_path}[/yellow]")
        console.print("Use --force to overwrite")
        return

    try:
        create_default_config_file(config_path)
        console.print(f"[green]Configuration file created at {config_path}[/green]")
    except Exception as e:
        console.print(f"[red]Error creating config file: {str(e)}[/red]")
        sys.exit(EXIT_FAILURE)


def main():
    """Main entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
