from __future__ import annotations

import functools
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import click
from rich.console import Console

from motorwaympc import __version__ as VERSION
from motorwaympc.exceptions import ConfigError
from motorwaympc.logging_config import logger as log
from motorwaympc.logging_config import set_log_verbosity
from motorwaympc.managers import (
    MODES,
    ScenarioManager,
    SweepManager,
    print_report,
)
from motorwaympc.metrics import MetricsReport, recompute as recompute_metrics
from motorwaympc.models.config import ScenarioConfig, parse_override

CONTEXT_SETTINGS = dict(help_option_names=["-h", "--help"])

EXIT_VIOLATIONS = 1
EXIT_CONFIG = 2


def scenario_options(func: Callable) -> Callable:
    """Options shared by commands that load a scenario file."""
    options = [
        click.argument(
            "config_path",
            required=False,
            type=click.Path(exists=True, dir_okay=False, path_type=Path),
            metavar="[CONFIG]",
        ),
        click.option(
            "--set",
            "overrides",
            multiple=True,
            metavar="SECTION.KEY=VALUE",
            help="Override a configuration key; may be repeated.",
        ),
        click.option("--seed", type=int, help="Seed of the run (replaces `seeds`)."),
        click.option("--duration", type=float, help="Simulated time in seconds."),
        click.option("--inflow", type=float, help="Arrivals in veh/h."),
        click.option("--penetration", type=float, help="Share of automated vehicles."),
        click.option(
            "--mode",
            type=click.Choice(MODES),
            help="Connectivity of the automated vehicles.",
        ),
        click.option(
            "--output-dir",
            type=click.Path(file_okay=False, path_type=Path),
            help="Root directory for results.",
        ),
        click.option("--workers", type=int, help="Planner threads per simulation."),
        click.option(
            "--trace/--no-trace",
            default=None,
            help="Write (or skip) the per-vehicle trace.",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def load_config(
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    shortcuts: Dict[str, Any],
) -> ScenarioConfig:
    """Scenario file (or defaults) with `--set` overrides and shortcut flags."""
    config = (
        ScenarioConfig.from_yaml(config_path) if config_path else ScenarioConfig()
    )
    changes: Dict[str, Any] = dict(parse_override(item) for item in overrides)
    mapping = {
        "seed": "seeds",
        "duration": "duration",
        "inflow": "spawn.inflow",
        "penetration": "spawn.penetration",
        "mode": "spawn.connectivity",
        "output_dir": "output_dir",
        "workers": "workers",
        "trace": "trace",
    }
    for name, key in mapping.items():
        value = shortcuts.get(name)
        if value is None:
            continue
        if name == "seed":
            value = [value]
        elif name == "output_dir":
            value = str(value)
        changes[key] = value
    return config.with_overrides(changes) if changes else config


def config_errors(func: Callable) -> Callable:
    """Report configuration errors with their key path and exit with code 2."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except ConfigError as ce:
            Console(stderr=True).print(f"[bold red]Configuration error:[/] {ce}")
            raise SystemExit(EXIT_CONFIG) from ce

    return wrapper


@click.group(name="motorway-mpc", context_settings=CONTEXT_SETTINGS)
@click.help_option("-h", "--help", help="Show this message and exit.")
@set_log_verbosity()
@click.version_option(
    version=VERSION,
    package_name="motorway-mpc",
    message="%(package)s:%(version)s",
)
@click.pass_context
def cli(ctx, verbose: int = 0, quiet: bool = False):
    """
    MPC path planning for automated vehicles on a simulated motorway
    ----------------------------------------------------------------

    \b
    Commands:
    \b
            run: Simulate one scenario and write its results
            sweep: Simulate penetration rates x modes x seeds
            defaults: Print the default scenario file
            recompute: Rebuild the metrics of a run from its trace

    \b
    Example:
    \b
            one hour at 3000 veh/h with half of the vehicles automated
            $ motorway-mpc run scenario.yaml --inflow 3000 --penetration 0.5

    \b
            connected vs non-connected over three seeds
            $ motorway-mpc sweep scenario.yaml -p 0 -p 0.5 -p 1 --seeds 0 --seeds 1 --seeds 2
    """
    ctx.ensure_object(dict)


@cli.command(name="run")
@scenario_options
@set_log_verbosity()
@config_errors
def run(
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    verbose: int = 0,
    quiet: bool = False,
    **shortcuts: Any,
):
    """Simulate one scenario.

    Writes trace.csv, audit.csv, plans.jsonl, metrics.json, timings.json and
    effective_config.yaml into a timestamped directory. Exits with code 1 if
    the audit found safety violations.
    """
    config = load_config(config_path, overrides, shortcuts)
    result = ScenarioManager(config).run()
    print_report(result.report, title=f"Run metrics (seed {result.seed})")
    click.echo(f"Results written to {result.run_dir}")
    if result.violations:
        log.error("Audit found %d safety violations.", result.violations)
        raise SystemExit(EXIT_VIOLATIONS)


@cli.command(name="sweep")
@scenario_options
@click.option(
    "--penetrations",
    "-p",
    type=float,
    multiple=True,
    default=(0.0, 0.25, 0.5, 0.75, 1.0),
    show_default=True,
    help="Penetration rates to simulate; may be repeated.",
)
@click.option(
    "--modes",
    type=click.Choice(MODES),
    multiple=True,
    default=MODES,
    show_default=True,
    help="Connectivity modes to simulate; may be repeated.",
)
@click.option(
    "--seeds",
    type=int,
    multiple=True,
    help="Seeds to simulate; defaults to the configured seeds.",
)
@click.option("--jobs", "-j", type=int, default=1, show_default=True, help="Parallel simulations.")
@click.option(
    "--force",
    is_flag=True,
    default=False,
    show_default=True,
    help="Re-run cells even if a cached result exists.",
)
@set_log_verbosity()
@config_errors
def sweep(
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    penetrations: Tuple[float, ...],
    modes: Tuple[str, ...],
    seeds: Tuple[int, ...],
    jobs: int = 1,
    force: bool = False,
    verbose: int = 0,
    quiet: bool = False,
    **shortcuts: Any,
):
    """Simulate every (penetration, mode, seed) cell and aggregate by seed.

    Writes cells.csv (one row per run) and sweep.csv (seed-averaged rows per
    penetration and mode).
    """
    config = load_config(config_path, overrides, shortcuts)
    manager = SweepManager(
        config,
        penetrations=list(penetrations),
        modes=list(modes),
        seeds=list(seeds) or None,
        jobs=jobs,
        force=force,
    )
    table = manager.run()
    SweepManager.print(table)


@cli.command(name="defaults")
@click.option(
    "--output",
    "-o",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Write the file here instead of printing it.",
)
def defaults(output: Optional[Path]):
    """Print the default scenario file."""
    text = ScenarioConfig().to_yaml(output)
    if output is None:
        click.echo(text, nl=False)
    else:
        click.echo(f"Defaults written to {output}")


@cli.command(name="recompute")
@click.argument(
    "run_dir",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@set_log_verbosity()
@config_errors
def recompute(run_dir: Path, verbose: int = 0, quiet: bool = False):
    """Rebuild the metrics of RUN_DIR from its trace and compare them."""
    config = ScenarioConfig.from_yaml(run_dir / "effective_config.yaml")
    try:
        report = recompute_metrics(run_dir, config.road.section_length)
    except FileNotFoundError as fnfe:
        raise click.ClickException(str(fnfe)) from fnfe
    print_report(report, title=f"Recomputed metrics of {run_dir.name}")
    stored = run_dir / "metrics.json"
    if stored.exists():
        same = MetricsReport.from_json(stored).as_dict() == report.as_dict()
        click.echo("matches metrics.json" if same else "differs from metrics.json")
        if not same:
            raise SystemExit(1)


if __name__ == "__main__":
    cli()
