"""Orchestration of the flowdense commands: load inputs, fit, write artifacts."""

import logging
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from flowdense import diagnostics
from flowdense.artifacts import ArtifactWriter, load_model
from flowdense.config import Settings
from flowdense.datasets import load_data, read_csv
from flowdense.estimator import DensityEstimate, density_estimate, fit_pmle, sample_estimate
from flowdense.exceptions import DataError, FlowDenseError, OptimizerStalledError
from flowdense.models import (
    DiagnosticsDocument,
    ExperimentConfig,
    FitRunConfig,
    SemiFitRunConfig,
    SteinRecord,
    VariantSpec,
)
from flowdense.semiparametric import SemiFitReport, fit_semiparametric, heldout_comparison

logger = logging.getLogger(__name__)

FIGURES = ("fig2", "fig3", "fig4")


def _check_dim(data: np.ndarray, dim: int) -> None:
    if data.shape[1] != dim:
        raise DataError(f"data have dimension {data.shape[1]} but the kernel expects {dim}")


def _fit_or_best(data, target, kernel, config) -> tuple[DensityEstimate, bool]:
    try:
        return fit_pmle(data, target, kernel, config), False
    except OptimizerStalledError as err:
        if err.best_estimate is None:
            raise
        logger.warning("optimizer stalled: %s", err)
        return err.best_estimate, True


def _density_rows(estimate: DensityEstimate, data: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    points = diagnostics.evaluation_grid(estimate, data, size) if estimate.dim == 1 else data
    return points, np.atleast_1d(density_estimate(estimate, points))


def _write_density(
    writer: ArtifactWriter, name: str, estimate: DensityEstimate, data: np.ndarray, size: int
) -> None:
    points, fhat = _density_rows(estimate, data, size)
    target = np.exp(np.atleast_1d(estimate.target.log_density(points)))
    writer.write_points(name, points, {"fhat": fhat, "target": target})


def _diagnostics_document(report: diagnostics.DiagnosticReport, gof: diagnostics.GofResult | None):
    return DiagnosticsDocument(
        times=report.times,
        residual_norm=report.residual_norm,
        relative_residual=report.relative_residual,
        stein=[
            SteinRecord(field=s.field_id, t0=s.t0, t1=s.t1, field_norm=s.field_norm) for s in report.stein_residuals
        ],
        ks_statistic=None if gof is None else gof.ks_statistic,
        ks_p_value=None if gof is None else gof.p_value,
    )


def _write_curves(writer: ArtifactWriter, name: str, report: diagnostics.DiagnosticReport) -> None:
    def rows():
        for curve in report.curves:
            for x, lv, d in zip(curve.x_grid, curve.lambda_v, curve.d, strict=True):
                yield [curve.t, *map(float, x), *map(float, lv), *map(float, d)]

    dim = report.curves[0].x_grid.shape[1] if report.curves else 1
    if dim == 1:
        header = ["t", "x", "lambda_v", "D"]
    else:
        header = ["t"] + [f"{col}{i}" for col in ("x", "lambda_v", "D") for i in range(dim)]
    writer.write_csv(name, header, rows())


# ============================================================================
# fit / semifit / diagnose / sample
# ============================================================================


def run_fit(config: FitRunConfig, base_dir: Path | None = None, output_dir: Path | None = None) -> dict[str, Any]:
    """Fit a flow density estimate and write model.json, density.csv and fit_report.json.

    Args:
        config: Validated fit run config.
        base_dir: Folder relative data paths resolve against.
        output_dir: Overrides config.output_dir.

    Returns:
        Summary with the final energy, EL residual, iteration count and output folder.

    Raises:
        DataError: If the data cannot be loaded.
        OptimizerStalledError: After the artifacts of the best state are written.
    """
    data = load_data(config.data, base_dir)
    kernel = config.kernel.build(data)
    _check_dim(data, kernel.dim)
    target = config.target.build()
    estimate, stalled = _fit_or_best(data, target, kernel, config.fit)

    writer = ArtifactWriter(output_dir or config.output_dir)
    writer.write_model(estimate, seed=config.fit.seed)
    _write_density(writer, "density.csv", estimate, data, config.grid_points)
    writer.write_json("fit_report.json", estimate.report)

    summary = {
        "observations": int(data.shape[0]),
        "knots": estimate.knots.size,
        "energy": estimate.report.final_energy,
        "el_residual": estimate.report.el_residual,
        "iterations": estimate.report.iterations,
        "converged": estimate.report.converged,
        "output_dir": str(writer.output_dir),
    }
    if stalled:
        raise OptimizerStalledError(f"optimizer stalled; best state written to {writer.output_dir}", estimate)
    return summary


def _semifit_artifacts(writer: ArtifactWriter, report: SemiFitReport, data: np.ndarray, size: int, prefix: str = ""):
    estimate = report.estimate
    writer.write_json(
        f"{prefix}semifit_report.json",
        {
            "family": report.family,
            "converged": report.converged,
            "stalled": report.stalled,
            "message": report.message,
            "theta": [float(v) for v in report.theta],
            "theta_trace": [it.theta for it in report.iterates],
            "objective_trace": report.objective_trace,
            "iterates": [it.model_dump() for it in report.iterates],
        },
    )
    writer.write_model(estimate, name=f"{prefix}model.json")
    _write_density(writer, f"{prefix}density.csv", estimate, data, size)
    points, _ = _density_rows(estimate, data, size)
    parametric = np.exp(np.atleast_1d(estimate.target.log_density(points)))
    writer.write_points(f"{prefix}target_density.csv", points, {"density": parametric})


def run_semifit(
    config: SemiFitRunConfig, base_dir: Path | None = None, output_dir: Path | None = None
) -> dict[str, Any]:
    """Semiparametric fit; writes semifit_report.json, model.json, density.csv, target_density.csv.

    Raises:
        DataError: If the data cannot be loaded.
        OptimizerStalledError: After artifacts are written, when a flow step stalled.
    """
    data = load_data(config.data, base_dir)
    kernel = config.kernel.build(data)
    _check_dim(data, kernel.dim)
    report = fit_semiparametric(data, config.family, kernel, config.fit, config.outer)

    writer = ArtifactWriter(output_dir or config.output_dir)
    _semifit_artifacts(writer, report, data, config.grid_points)
    summary = {
        "family": report.family,
        "theta": [float(v) for v in report.theta],
        "outer_iterations": len(report.iterates),
        "converged": report.converged,
        "output_dir": str(writer.output_dir),
    }
    if report.stalled:
        raise OptimizerStalledError(report.message or "flow step stalled", report.estimate)
    return summary


def run_diagnose(
    model_path: Path,
    data_path: Path,
    times: list[float] | None = None,
    grid_size: int = 200,
    output_dir: Path | None = None,
) -> dict[str, Any]:
    """Euler-Lagrange and Stein diagnostics of a saved model; writes diagnostics.csv and diagnostics.json."""
    estimate = load_model(model_path)
    data = read_csv(data_path)
    _check_dim(data, estimate.dim)
    x_grid = diagnostics.evaluation_grid(estimate, data, grid_size) if estimate.dim == 1 else None
    report = diagnostics.el_diagnostic(estimate, data, times or list(diagnostics.DEFAULT_TIMES), x_grid)
    gof = diagnostics.pushforward_gof(estimate, data) if estimate.dim == 1 else None

    writer = ArtifactWriter(output_dir or Path(model_path).parent)
    _write_curves(writer, "diagnostics.csv", report)
    writer.write_json("diagnostics.json", _diagnostics_document(report, gof))
    return {
        "times": report.times,
        "relative_residual": report.relative_residual,
        "output_dir": str(writer.output_dir),
    }


def run_sample(model_path: Path, m: int, seed: int | None, output: Path | None = None) -> dict[str, Any]:
    """Draw m points from a saved model into samples.csv."""
    if m < 0:
        raise ValueError("m must be non-negative")
    estimate = load_model(model_path)
    drawn = sample_estimate(estimate, m, seed)
    output = Path(output) if output is not None else Path(model_path).parent / "samples.csv"
    writer = ArtifactWriter(output.parent)
    flags = {"extrapolated": drawn.extrapolated.astype(int)}
    writer.write_points(output.name, drawn.points.reshape(-1, estimate.dim), flags)
    return {"samples": m, "extrapolated": int(drawn.extrapolated.sum()), "path": str(output)}


# ============================================================================
# Figure reproduction
# ============================================================================


def load_experiment(figure: str) -> ExperimentConfig:
    """Packaged configuration of a figure."""
    if figure not in FIGURES:
        raise ValueError(f"figure must be one of {FIGURES}, got {figure!r}")
    text = resources.files("flowdense.experiments").joinpath(f"{figure}.json").read_text()
    return ExperimentConfig.model_validate_json(text)


def _write_diagnostics(
    experiment: ExperimentConfig, estimate: DensityEstimate, data: np.ndarray, writer: ArtifactWriter, stem: str
) -> tuple[diagnostics.DiagnosticReport, diagnostics.GofResult | None]:
    """EL curves on the configured grid and Stein residuals over the configured dictionary."""
    spec = experiment.diagnostics
    x_grid = diagnostics.evaluation_grid(estimate, data, spec.grid) if estimate.dim == 1 else None
    fields = diagnostics.stein_dictionary(estimate.kernel, data, spec.stein_centers)
    report = diagnostics.el_diagnostic(estimate, data, spec.times, x_grid, fields)
    gof = diagnostics.pushforward_gof(estimate, data) if estimate.dim == 1 else None
    _write_curves(writer, f"{stem}.csv", report)
    writer.write_json(f"{stem}.json", _diagnostics_document(report, gof))
    return report, gof


def _flow_variant(experiment: ExperimentConfig, variant: VariantSpec, data, kernel, writer: ArtifactWriter):
    config = experiment.fit
    if variant.knots is not None:
        config = config.model_copy(update={"knots": variant.knots})
    estimate, stalled = _fit_or_best(data, experiment.target.build(), kernel, config)
    name = variant.name

    writer.write_model(estimate, seed=config.seed, name=f"model_{name}.json")
    _write_density(writer, f"density_{name}.csv", estimate, data, experiment.grid_points)
    report, gof = _write_diagnostics(experiment, estimate, data, writer, f"diagnostics_{name}")
    writer.write_json(f"fit_report_{name}.json", estimate.report)
    t0 = report.times.index(0.0) if 0.0 in report.times else 0
    return {
        "knots": estimate.knots.size,
        "iterations": estimate.report.iterations,
        "converged": estimate.report.converged and not stalled,
        "energy": estimate.report.final_energy,
        "relative_residual_t0": report.relative_residual[t0],
        "residual_norm_t0": report.residual_norm[t0],
        "ks_statistic": gof.ks_statistic,
        "ks_p_value": gof.p_value,
    }


def _semi_variant(experiment: ExperimentConfig, variant: VariantSpec, data, kernel, writer: ArtifactWriter):
    report = fit_semiparametric(data, variant.family, kernel, experiment.fit, experiment.outer)
    _semifit_artifacts(writer, report, data, experiment.grid_points, prefix=f"{variant.name}_")
    diag, _ = _write_diagnostics(experiment, report.estimate, data, writer, f"{variant.name}_diagnostics")
    t0 = diag.times.index(0.0) if 0.0 in diag.times else 0
    heldout = heldout_comparison(
        data, variant.family, kernel, experiment.fit, experiment.outer, experiment.heldout_folds, experiment.fit.seed
    )
    return {
        "family": variant.family,
        "theta": [float(v) for v in report.theta],
        "converged": report.converged,
        "outer_iterations": len(report.iterates),
        "relative_residual_t0": diag.relative_residual[t0],
        "heldout_loglik_semiparametric": heldout.semiparametric,
        "heldout_loglik_parametric": heldout.parametric,
        "semiparametric_wins": heldout.semiparametric > heldout.parametric,
    }


def _acceptance(figure: str, results: dict[str, dict[str, Any]]) -> dict[str, Any]:
    if figure == "fig2":
        at_data = results["at_data"]["relative_residual_t0"]
        augmented = results["augmented_3n"]["relative_residual_t0"]
        return {"augmented_below_0_05": augmented <= 0.05, "augmented_below_at_data": augmented < at_data}
    if figure == "fig3":
        full = results["at_data"]["relative_residual_t0"]
        sparse = results["subsample_20"]["relative_residual_t0"]
        return {
            "residual_ratio": sparse / full if full > 0 else float("inf"),
            "residual_within_factor_2": sparse <= 2.0 * full,
            "ks_p_values_above_0_01": all(r["ks_p_value"] > 0.01 for r in results.values()),
        }
    return {"semiparametric_beats_parametric": all(r["semiparametric_wins"] for r in results.values())}


def run_reproduce(figure: str, outdir: Path, settings: Settings | None = None) -> dict[str, Any]:
    """Run a packaged figure configuration and write every curve plus summary.json."""
    return run_experiment(load_experiment(figure), outdir, settings)


def run_experiment(experiment: ExperimentConfig, outdir: Path, settings: Settings | None = None) -> dict[str, Any]:
    """Run an experiment configuration; variants run concurrently, up to settings.threads at a time."""
    settings = settings or Settings()
    figure = experiment.figure
    data = load_data(experiment.data)
    kernel = experiment.kernel.build(data)
    _check_dim(data, kernel.dim)
    writer = ArtifactWriter(outdir)
    writer.write_points("data.csv", data)

    runner = _semi_variant if figure == "fig4" else _flow_variant
    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        futures = {v.name: pool.submit(runner, experiment, v, data, kernel, writer) for v in experiment.variants}
        results = {}
        for name, future in futures.items():
            try:
                results[name] = future.result()
            except FlowDenseError:
                logger.error("variant %s failed", name)
                raise

    summary = {
        "figure": figure,
        "description": experiment.description,
        "observations": int(data.shape[0]),
        "kernel_sigma": kernel.sigma,
        "lambda": experiment.fit.lam,
        "variants": results,
        "acceptance": _acceptance(figure, results),
    }
    writer.write_json("summary.json", summary)
    logger.info("%s reproduction written to %s", figure, writer.output_dir)
    return summary

