"""Pydantic models for run configs, model documents and reports."""

from pathlib import Path
from typing import Annotated, Literal

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    TypeAdapter,
    field_validator,
    model_validator,
)

from flowdense.flow import KnotSystem, TimeGrid
from flowdense.kernel import RadialKernel, make_kernel
from flowdense.target import (
    GaussianMixture2Target,
    GaussianTarget,
    TargetDensity,
    UniformTaperedTarget,
)


class StrictModel(BaseModel):
    """Base for config documents: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# ============================================================================
# Kernel and target specs
# ============================================================================


class KernelSpec(StrictModel):
    """Kernel family and bandwidth.

    The bandwidth is either given directly or as a fraction of the data's
    standard deviation (resolved once the data are loaded).
    """

    family: Literal["gaussian"] = "gaussian"
    sigma: PositiveFloat | None = None
    sigma_data_sd_fraction: PositiveFloat | None = None
    dim: PositiveInt = 1

    @model_validator(mode="after")
    def exactly_one_bandwidth(self) -> "KernelSpec":
        if (self.sigma is None) == (self.sigma_data_sd_fraction is None):
            raise ValueError("give exactly one of sigma or sigma_data_sd_fraction")
        return self

    def build(self, data: np.ndarray | None = None) -> RadialKernel:
        """Instantiate the kernel, resolving a data-relative bandwidth if needed."""
        if self.sigma is not None:
            return make_kernel(self.family, self.sigma, self.dim)
        if data is None:
            raise ValueError("data are required to resolve a data-relative bandwidth")
        sd = float(np.std(np.asarray(data, dtype=float), axis=0).mean())
        return make_kernel(self.family, self.sigma_data_sd_fraction * sd, self.dim)


class UniformTaperedSpec(StrictModel):
    family: Literal["uniform_tapered"] = "uniform_tapered"
    a: float = 0.0
    b: float = 1.0
    w: PositiveFloat | None = None
    dim: PositiveInt = 1

    @model_validator(mode="after")
    def ordered_interval(self) -> "UniformTaperedSpec":
        if not self.a < self.b:
            raise ValueError("need a < b")
        return self

    def build(self) -> TargetDensity:
        return UniformTaperedTarget(a=self.a, b=self.b, w=self.w, dim=self.dim)


class GaussianSpec(StrictModel):
    family: Literal["gaussian"] = "gaussian"
    mu: float | list[float] = 0.0
    sigma: PositiveFloat = 1.0
    dim: PositiveInt = 1

    def build(self) -> TargetDensity:
        return GaussianTarget(mu=np.asarray(self.mu, dtype=float), sigma=self.sigma, dim=self.dim)


class GaussianMixture2Spec(StrictModel):
    family: Literal["gaussian_mixture2"] = "gaussian_mixture2"
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    mu1: float = 0.0
    sigma1: PositiveFloat = 1.0
    mu2: float = 0.0
    sigma2: PositiveFloat = 1.0
    dim: Literal[1] = 1

    def build(self) -> TargetDensity:
        return GaussianMixture2Target(
            alpha=self.alpha, mu1=self.mu1, sigma1=self.sigma1, mu2=self.mu2, sigma2=self.sigma2
        )


TargetSpec = Annotated[UniformTaperedSpec | GaussianSpec | GaussianMixture2Spec, Field(discriminator="family")]
_target_adapter: TypeAdapter = TypeAdapter(TargetSpec)


def target_spec_of(target: TargetDensity) -> UniformTaperedSpec | GaussianSpec | GaussianMixture2Spec:
    """Spec document describing an existing target."""
    return _target_adapter.validate_python(target.to_spec())


# ============================================================================
# Fit configuration
# ============================================================================


class KnotSpec(StrictModel):
    """Knot placement strategy."""

    strategy: Literal["at_data", "augmented_3n", "subsample", "explicit"] = "at_data"
    n_knots: PositiveInt | None = None
    points: list[float] | list[list[float]] | None = None
    delta: PositiveFloat = 1e-4

    @model_validator(mode="after")
    def strategy_arguments(self) -> "KnotSpec":
        if self.strategy == "subsample" and self.n_knots is None:
            raise ValueError("subsample strategy needs n_knots")
        if self.strategy == "explicit" and self.points is None:
            raise ValueError("explicit strategy needs points")
        return self


class OptimizerConfig(StrictModel):
    """Line-search ascent with Armijo backtracking.

    `lbfgs` scales the ascent direction with a limited-memory inverse Hessian
    built from the last `memory` steps; `gradient` uses the plain (metric) gradient.
    """

    max_iters: NonNegativeInt = 2000
    gradient_tol: PositiveFloat = 1e-6
    armijo_c: float = Field(1e-4, gt=0.0, lt=1.0)
    backtrack_factor: float = Field(0.5, gt=0.0, lt=1.0)
    max_backtracks: PositiveInt = 50
    initial_step: PositiveFloat | None = None
    metric: Literal["rkhs", "euclidean"] = "rkhs"
    method: Literal["lbfgs", "gradient"] = "lbfgs"
    memory: PositiveInt = 20


class FitConfig(StrictModel):
    """Penalised likelihood fit settings; `lambda` is accepted as the JSON key for lam."""

    lam: PositiveFloat = Field(alias="lambda")
    steps: PositiveInt = 20
    knots: KnotSpec = Field(default_factory=KnotSpec)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    optimize_knot_positions: bool = False
    seed: int = 0

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.steps)


class OuterConfig(StrictModel):
    """Stopping rules for the alternating semiparametric loop."""

    max_outer: PositiveInt = 25
    theta_tol: PositiveFloat = 1e-5
    phi_tol: PositiveFloat | None = None


# ============================================================================
# Data sources
# ============================================================================


class InlineData(StrictModel):
    source: Literal["inline"] = "inline"
    values: list[float] | list[list[float]]


class CsvData(StrictModel):
    source: Literal["csv"] = "csv"
    path: Path
    columns: list[str] | None = None


class GeneratorData(StrictModel):
    source: Literal["generator"] = "generator"
    generator: Literal["truncated_normal_mixture", "chi2_normal_mixture", "gaussian"]
    n: PositiveInt
    seed: int = 0
    params: dict[str, float | list[float]] = Field(default_factory=dict)


DataSpec = Annotated[InlineData | CsvData | GeneratorData, Field(discriminator="source")]


# ============================================================================
# Run configs
# ============================================================================


class DiagnosticSpec(StrictModel):
    times: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0])
    grid: PositiveInt = 200
    stein_centers: PositiveInt = 10

    @field_validator("times")
    @classmethod
    def times_in_unit_interval(cls, v: list[float]) -> list[float]:
        if not v or any(not 0.0 <= t <= 1.0 for t in v):
            raise ValueError("diagnostic times must be a non-empty subset of [0, 1]")
        return v


class FitRunConfig(StrictModel):
    """Document read by `flowdense fit`."""

    data: DataSpec
    kernel: KernelSpec
    target: TargetSpec
    fit: FitConfig
    grid_points: PositiveInt = 512
    output_dir: Path = Path("flowdense-out")


class SemiFitRunConfig(StrictModel):
    """Document read by `flowdense semifit`."""

    data: DataSpec
    kernel: KernelSpec
    family: Literal["gaussian", "gaussian_mixture2"]
    fit: FitConfig
    outer: OuterConfig = Field(default_factory=OuterConfig)
    grid_points: PositiveInt = 512
    output_dir: Path = Path("flowdense-out")


class VariantSpec(StrictModel):
    """One curve of a figure: a knot strategy (flow fits) or a family (semiparametric fits)."""

    name: str
    knots: KnotSpec | None = None
    family: Literal["gaussian", "gaussian_mixture2"] | None = None


class ExperimentConfig(StrictModel):
    """Packaged configuration of one figure reproduction."""

    figure: Literal["fig2", "fig3", "fig4"]
    description: str = ""
    data: DataSpec
    kernel: KernelSpec
    target: TargetSpec | None = None
    fit: FitConfig
    variants: list[VariantSpec]
    diagnostics: DiagnosticSpec = Field(default_factory=DiagnosticSpec)
    outer: OuterConfig = Field(default_factory=OuterConfig)
    heldout_folds: int = Field(5, ge=2)
    grid_points: PositiveInt = 512

    @model_validator(mode="after")
    def variants_match_figure(self) -> "ExperimentConfig":
        if not self.variants:
            raise ValueError("at least one variant is required")
        if self.figure == "fig4":
            if any(v.family is None for v in self.variants):
                raise ValueError("semiparametric variants need a family")
        elif self.target is None:
            raise ValueError(f"{self.figure} needs a target")
        return self


# ============================================================================
# Persisted documents and reports
# ============================================================================


class RngRecord(StrictModel):
    name: str = "PCG64"
    seed: int | None = None


class KernelRecord(StrictModel):
    family: Literal["gaussian"] = "gaussian"
    sigma: PositiveFloat
    dim: PositiveInt = 1


class ModelDocument(StrictModel):
    """Everything needed to rebuild a fitted density estimate."""

    format_version: Literal[1] = 1
    kernel: KernelRecord
    knots: list[list[float]]
    momenta: list[list[float]]
    target: TargetSpec
    steps: PositiveInt
    lam: PositiveFloat = Field(alias="lambda")
    rng: RngRecord = Field(default_factory=RngRecord)

    @model_validator(mode="after")
    def knots_match_momenta(self) -> "ModelDocument":
        if len(self.knots) != len(self.momenta):
            raise ValueError("knots and momenta must have equal counts")
        if any(len(row) != self.kernel.dim for row in self.knots + self.momenta):
            raise ValueError("knot and momentum rows must match the kernel dimension")
        return self

    def knot_system(self) -> KnotSystem:
        dim = self.kernel.dim
        return KnotSystem(
            knots=np.asarray(self.knots, dtype=float).reshape(-1, dim),
            momenta=np.asarray(self.momenta, dtype=float).reshape(-1, dim),
        )


class FitReport(BaseModel):
    """Outcome of a penalised likelihood fit."""

    final_energy: float
    gradient_norm: float
    el_residual: float | None = None
    iterations: int
    converged: bool
    stopped: Literal["gradient", "max_iters", "roundoff", "stalled"] = "gradient"
    energy_trace: list[float] = Field(default_factory=list)
    gradient_norm_trace: list[float] = Field(default_factory=list)
    step_trace: list[float] = Field(default_factory=list)


class OuterIterate(BaseModel):
    """One pass of the alternating loop."""

    iteration: int
    theta: list[float]
    objective_after_flow: float
    objective: float
    loglik_theta: float
    knot_count: int
    momentum_sup: float
    theta_change: float
    map_change: float


class SteinRecord(BaseModel):
    field: str
    t0: float
    t1: float
    field_norm: float


class DiagnosticsDocument(BaseModel):
    times: list[float]
    residual_norm: list[float]
    relative_residual: list[float]
    stein: list[SteinRecord] = Field(default_factory=list)
    ks_statistic: float | None = None
    ks_p_value: float | None = None
