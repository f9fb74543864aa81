"""Command-line interface for flowdense."""

import sys
from collections.abc import Callable
from pathlib import Path

import click
from pydantic import BaseModel, ValidationError

from flowdense import orchestrator
from flowdense.config import Settings, configure_logging
from flowdense.exceptions import DataError, FlowDenseError, OptimizerStalledError
from flowdense.models import FitRunConfig, SemiFitRunConfig

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_STALLED = 4


def parse_times(ctx: click.Context, param: click.Parameter, value: str | None) -> list[float] | None:
    """Parse a comma-separated list of times in [0, 1]."""
    if value is None:
        return None
    try:
        times = [float(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"Invalid times: {value}. Use e.g. 0,0.5,1.")
    if not times or any(not 0.0 <= t <= 1.0 for t in times):
        raise click.BadParameter(f"Times must lie in [0, 1]: {value}")
    return times


def _load_config(path: Path, schema: type[BaseModel]) -> BaseModel:
    try:
        text = path.read_text()
    except OSError as e:
        click.echo(f"Configuration error: cannot read {path}: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        return schema.model_validate_json(text)
    except ValidationError as e:
        click.echo(f"Configuration error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


def _run(action: Callable[[], dict], report: Callable[[dict], None]) -> None:
    """Run an orchestrator action, mapping failures onto exit codes."""
    try:
        result = action()
    except ValidationError as e:
        click.echo(f"Configuration error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except DataError as e:
        click.echo(f"Data error: {e}", err=True)
        sys.exit(EXIT_DATA)
    except OptimizerStalledError as e:
        click.echo(f"Optimizer stalled: {e}", err=True)
        sys.exit(EXIT_STALLED)
    except FlowDenseError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_ERROR)
    except ValueError as e:
        click.echo(f"Invalid argument: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    report(result)


@click.group()
@click.pass_context
def main(ctx: click.Context) -> None:
    """Density estimation by kernel-flow diffeomorphisms of a target density."""
    try:
        settings = Settings()
    except ValidationError as e:
        click.echo(f"Configuration error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    configure_logging(settings)
    ctx.obj = settings


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
def fit(config_path: Path, output_dir: Path | None) -> None:
    """Fit a flow density estimate from CONFIG_PATH."""
    config = _load_config(config_path, FitRunConfig)

    def report(result: dict) -> None:
        click.echo(
            f"Fitted {result['knots']} knots to {result['observations']} observations "
            f"in {result['iterations']} iterations (energy {result['energy']:.10g})"
        )
        click.echo(f"Wrote model.json, density.csv, fit_report.json to {result['output_dir']}")

    _run(lambda: orchestrator.run_fit(config, config_path.parent, output_dir), report)


@main.command()
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("data_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--times", callback=parse_times, help="Comma-separated diagnostic times (default 0,0.5,1).")
@click.option("--grid", "grid_size", type=click.IntRange(min=2), default=200, show_default=True)
@click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
def diagnose(
    model_path: Path, data_path: Path, times: list[float] | None, grid_size: int, output_dir: Path | None
) -> None:
    """Euler-Lagrange and Stein diagnostics of MODEL_PATH on DATA_PATH."""

    def report(result: dict) -> None:
        for t, r in zip(result["times"], result["relative_residual"], strict=True):
            click.echo(f"t={t:.3f}: relative EL residual {r:.4g}")
        click.echo(f"Wrote diagnostics.csv, diagnostics.json to {result['output_dir']}")

    _run(lambda: orchestrator.run_diagnose(model_path, data_path, times, grid_size, output_dir), report)


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
def semifit(config_path: Path, output_dir: Path | None) -> None:
    """Semiparametric fit from CONFIG_PATH."""
    config = _load_config(config_path, SemiFitRunConfig)

    def report(result: dict) -> None:
        theta = ", ".join(f"{v:.6g}" for v in result["theta"])
        status = "converged" if result["converged"] else "not converged"
        click.echo(f"{result['family']} theta = ({theta}) after {result['outer_iterations']} passes, {status}")
        click.echo(f"Wrote semifit artifacts to {result['output_dir']}")

    _run(lambda: orchestrator.run_semifit(config, config_path.parent, output_dir), report)


@main.command()
@click.argument("figure", type=click.Choice(orchestrator.FIGURES))
@click.argument("outdir", type=click.Path(file_okay=False, path_type=Path))
@click.pass_obj
def reproduce(settings: Settings, figure: str, outdir: Path) -> None:
    """Reproduce FIGURE's curves and acceptance metrics into OUTDIR."""

    def report(result: dict) -> None:
        for name, passed in result["acceptance"].items():
            click.echo(f"{name}: {passed}")
        click.echo(f"Wrote {figure} artifacts to {outdir}")

    _run(lambda: orchestrator.run_reproduce(figure, outdir, settings), report)


@main.command()
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--m", "m", type=click.IntRange(min=0), required=True, help="Number of draws.")
@click.option("--seed", type=int, default=None, help="Seed of the PCG64 generator.")
@click.option("--out", "output", type=click.Path(dir_okay=False, path_type=Path), help="Output CSV path.")
def sample(model_path: Path, m: int, seed: int | None, output: Path | None) -> None:
    """Draw samples from the density in MODEL_PATH."""

    def report(result: dict) -> None:
        click.echo(f"Wrote {result['samples']} samples to {result['path']}")
        if result["extrapolated"]:
            click.echo(f"Warning: {result['extrapolated']} samples could not be inverted accurately", err=True)

    _run(lambda: orchestrator.run_sample(model_path, m, seed, output), report)


if __name__ == "__main__":
    main()
