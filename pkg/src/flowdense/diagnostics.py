"""Euler-Lagrange richness diagnostic and empirical Stein residuals.

At a stationary point of the penalised likelihood over the full field space,
lam v_t equals

    D_t(x) = (1/n) sum_k [ beta_{k,t} R(x, X_{k,t}) + grad_y R(x, y)|_{y = X_{k,t}} ]

with beta_{k,t} = grad H(X_{k,1}) Dphi_{t1}(X_{k,t}) + grad log det Dphi_{t1}(X_{k,t}).
The V-norm of lam v_t - D_t is computed exactly: both fields are finite
combinations of kernel sections.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy import stats

from flowdense.exceptions import UnsupportedDimensionError
from flowdense.flow import FlowTrajectory, KnotSystem, TimeGrid, shoot
from flowdense.kernel import RadialKernel, Section
from flowdense.target import TargetDensity

if TYPE_CHECKING:
    from flowdense.estimator import DensityEstimate

logger = logging.getLogger(__name__)

DEFAULT_TIMES = (0.0, 0.5, 1.0)
LOGDET_GRADIENT_SCALE = 1e-5


@dataclass(frozen=True)
class DiagnosticCurve:
    """lam v_t and D_t sampled on an evaluation grid."""

    t: float
    x_grid: np.ndarray
    lambda_v: np.ndarray
    d: np.ndarray


@dataclass(frozen=True)
class SteinEntry:
    field_id: str
    t0: float
    t1: float
    field_norm: float


@dataclass(frozen=True)
class DiagnosticReport:
    times: list[float]
    residual_norm: list[float]
    relative_residual: list[float]
    curves: list[DiagnosticCurve]
    stein_residuals: list[SteinEntry]


@dataclass(frozen=True)
class TestField:
    """Vector test field u = s(.) e_direction with s = R(., center) or d/dy_derivative R(., y)|_{y=center}."""

    center: np.ndarray
    direction: int
    derivative: int | None = None

    __test__ = False

    @property
    def field_id(self) -> str:
        centre = ",".join(f"{c:.6g}" for c in np.ravel(self.center))
        kind = "R" if self.derivative is None else f"dR{self.derivative}"
        return f"{kind}[{centre}]e{self.direction}"


@dataclass(frozen=True)
class GofResult:
    ks_statistic: float
    p_value: float


# ============================================================================
# Shared building blocks
# ============================================================================


def logdet_gradient_step(data: np.ndarray) -> float:
    """Finite-difference step for grad log det, proportional to the data scale."""
    scale = float(np.max(np.std(data, axis=0))) if data.shape[0] > 1 else 0.0
    return LOGDET_GRADIENT_SCALE * (scale if scale > 0 else 1.0)


def _trajectory(
    kernel: RadialKernel, knots: KnotSystem, data: np.ndarray, grid: TimeGrid
) -> FlowTrajectory:
    return shoot(kernel, knots, data, grid, track_jacobian=True, logdet_gradient_step=logdet_gradient_step(data))


def beta_coefficients(trajectory: FlowTrajectory, target: TargetDensity, index: int) -> np.ndarray:
    """beta_{k,t} at grid node `index` as an (n, d) array of row vectors."""
    jac = trajectory.jacobian_path
    grad_path = trajectory.logdet_gradient_path
    if jac is None or grad_path is None:
        raise ValueError("trajectory must carry Jacobians and log-det gradients")
    n, d = trajectory.particle_path.shape[1:]
    jt_inv = np.linalg.inv(jac[index])
    score = np.asarray(target.grad_log_density(trajectory.terminal_particles)).reshape(n, d)
    forward = jac[-1] @ jt_inv
    return np.einsum("kd,kde->ke", score, forward) + np.einsum(
        "kd,kde->ke", grad_path[-1] - grad_path[index], jt_inv
    )


def _residual_sections(
    kernel: RadialKernel, knots_t: KnotSystem, points: np.ndarray, beta: np.ndarray, lam: float
) -> tuple[list[Section], np.ndarray, np.ndarray]:
    """Sections spanning lam v_t - D_t and the coefficients of both parts.

    Returns (sections, coef_v, coef_d) with coefficient arrays of shape
    (len(sections), d): column p holds the e_p component.
    """
    n, d = points.shape
    sections = [Section(point=k, kind="value") for k in knots_t.knots]
    sections += [Section(point=p, kind="value") for p in points]
    sections += [Section(point=p, kind="gradient", component=i) for p in points for i in range(d)]

    size = knots_t.size
    coef_v = np.zeros((len(sections), d))
    coef_v[:size] = lam * knots_t.momenta
    coef_d = np.zeros_like(coef_v)
    coef_d[size : size + n] = beta / n
    grad_block = np.tile(np.eye(d), (n, 1)) / n
    coef_d[size + n :] = grad_block
    return sections, coef_v, coef_d


def _norm(gram: np.ndarray, coef: np.ndarray) -> float:
    return float(np.sqrt(max(np.einsum("ap,ab,bp->", coef, gram, coef), 0.0)))


def _residual_at(
    kernel: RadialKernel, trajectory: FlowTrajectory, target: TargetDensity, lam: float, index: int
) -> tuple[float, float]:
    knots_t = trajectory.knots_at(index)
    points = trajectory.particle_path[index]
    beta = beta_coefficients(trajectory, target, index)
    sections, coef_v, coef_d = _residual_sections(kernel, knots_t, points, beta, lam)
    gram = kernel.section_inner_products(sections)
    residual = _norm(gram, coef_v - coef_d)
    scale = _norm(gram, coef_v) + _norm(gram, coef_d)
    return residual, (residual / scale if scale > 0 else 0.0)


def relative_el_residual(
    kernel: RadialKernel,
    knots: KnotSystem,
    data: np.ndarray,
    target: TargetDensity,
    grid: TimeGrid,
    lam: float,
    t: float = 0.0,
) -> float:
    """||lam v_t - D_t||_V / (lam ||v_t||_V + ||D_t||_V) for a knot state."""
    data = kernel.as_points(data)
    trajectory = _trajectory(kernel, knots, data, grid)
    return _residual_at(kernel, trajectory, target, lam, grid.index_of(t))[1]


def diagnostic_curve(
    kernel: RadialKernel,
    trajectory: FlowTrajectory,
    target: TargetDensity,
    lam: float,
    index: int,
    x_grid: np.ndarray,
) -> DiagnosticCurve:
    """lam v_t(x) and D_t(x) on x_grid at node `index`."""
    knots_t = trajectory.knots_at(index)
    points = trajectory.particle_path[index]
    n = points.shape[0]
    beta = beta_coefficients(trajectory, target, index)
    if knots_t.size:
        lambda_v = lam * kernel.matrix(x_grid, knots_t.knots) @ knots_t.momenta
    else:
        lambda_v = np.zeros_like(x_grid)
    d = (kernel.matrix(x_grid, points) @ beta + kernel.grad_y_matrix(x_grid, points).sum(axis=1)) / n
    return DiagnosticCurve(t=float(trajectory.grid.nodes[index]), x_grid=x_grid, lambda_v=lambda_v, d=d)


def evaluation_grid(estimate: "DensityEstimate", data: np.ndarray, size: int = 200) -> np.ndarray:
    """Grid points covering the target support and the padded data range (d=1)."""
    if estimate.dim != 1:
        raise UnsupportedDimensionError(estimate.dim, "evaluation grid")
    lo, hi = estimate.target.support()
    pad = 3.0 * estimate.kernel.sigma
    lo = min(lo, float(data.min()) - pad)
    hi = max(hi, float(data.max()) + pad)
    return np.linspace(lo, hi, size)[:, None]


# ============================================================================
# Euler-Lagrange diagnostic
# ============================================================================


def el_diagnostic(
    estimate: "DensityEstimate",
    data,
    times: Sequence[float] = DEFAULT_TIMES,
    x_grid=None,
    test_fields: Sequence[TestField] | None = None,
) -> DiagnosticReport:
    """Residual norms and curves of lam v_t - D_t at the requested times.

    Times are snapped to the nearest node of the estimate's grid. Curves are
    sampled on x_grid, which defaults to `evaluation_grid` in d=1 and is left empty
    otherwise. Stein residuals use `test_fields` or the default dictionary.
    """
    kernel = estimate.kernel
    x = kernel.as_points(data)
    trajectory = _trajectory(kernel, estimate.knots, x, estimate.grid)
    if x_grid is None:
        x_grid = evaluation_grid(estimate, x) if kernel.dim == 1 else np.zeros((0, kernel.dim))
    else:
        x_grid = kernel.as_points(x_grid)

    indices = [estimate.grid.index_of(t) for t in times]
    norms, relative, curves = [], [], []
    for index in indices:
        residual, rel = _residual_at(kernel, trajectory, estimate.target, estimate.lam, index)
        norms.append(residual)
        relative.append(rel)
        curves.append(diagnostic_curve(kernel, trajectory, estimate.target, estimate.lam, index, x_grid))
        logger.info("EL residual at t=%.3f: %.6g (relative %.4g)", estimate.grid.nodes[index], residual, rel)

    fields = list(test_fields) if test_fields is not None else stein_dictionary(kernel, x)
    t0 = _stein_t0(kernel, estimate, trajectory, x, fields)
    t1 = _stein_t1(kernel, estimate, trajectory, fields)
    entries = [
        SteinEntry(field_id=f.field_id, t0=a, t1=b, field_norm=field_norm(kernel, f))
        for f, a, b in zip(fields, t0, t1, strict=True)
    ]
    return DiagnosticReport(
        times=[float(estimate.grid.nodes[i]) for i in indices],
        residual_norm=norms,
        relative_residual=relative,
        curves=curves,
        stein_residuals=entries,
    )


# ============================================================================
# Stein residuals
# ============================================================================


def stein_dictionary(kernel: RadialKernel, data: np.ndarray, n_centers: int = 10) -> list[TestField]:
    """Value and gradient kernel sections at quantile-spaced centres of the data."""
    x = kernel.as_points(data)
    order = np.argsort(x[:, 0], kind="stable")
    positions = np.unique(np.round(np.linspace(0.05, 0.95, n_centers) * (x.shape[0] - 1)).astype(int))
    centers = x[order[positions]]
    fields: list[TestField] = []
    for center in centers:
        for i in range(kernel.dim):
            fields.append(TestField(center=center, direction=i))
            fields.extend(TestField(center=center, direction=i, derivative=j) for j in range(kernel.dim))
    return fields


def _section(field: TestField) -> Section:
    if field.derivative is None:
        return Section(point=field.center, kind="value")
    return Section(point=field.center, kind="gradient", component=field.derivative)


def field_norm(kernel: RadialKernel, field: TestField) -> float:
    """||u||_V of a test field."""
    return float(np.sqrt(kernel.section_inner_products([_section(field)])[0, 0]))


def _field_values(kernel: RadialKernel, field: TestField, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """u(points) as (m, d) and div u(points) as (m,)."""
    center = kernel.as_point(field.center)[None]
    if field.derivative is None:
        scalar = kernel.matrix(points, center)[:, 0]
        div = kernel.grad_x_matrix(points, center)[:, 0, field.direction]
    else:
        scalar = kernel.grad_y_matrix(points, center)[:, 0, field.derivative]
        div = kernel.cross_hessian_matrix(points, center)[:, 0, field.direction, field.derivative]
    u = np.zeros_like(points)
    u[:, field.direction] = scalar
    return u, div


def _field_inner(kernel: RadialKernel, knots: KnotSystem, field: TestField) -> float:
    """<v, u>_V for v = sum_j eta_j R(., kappa_j)."""
    if knots.size == 0:
        return 0.0
    center = kernel.as_point(field.center)[None]
    if field.derivative is None:
        section = kernel.matrix(knots.knots, center)[:, 0]
    else:
        section = kernel.grad_y_matrix(knots.knots, center)[:, 0, field.derivative]
    return float(knots.momenta[:, field.direction] @ section)


def _stein_residuals(
    kernel: RadialKernel,
    knots: KnotSystem,
    points: np.ndarray,
    scores: np.ndarray,
    lam: float,
    fields: Sequence[TestField],
) -> list[float]:
    residuals = []
    for field in fields:
        u, div = _field_values(kernel, field, points)
        empirical = float(np.mean(np.sum(scores * u, axis=1) + div))
        residuals.append(lam * _field_inner(kernel, knots, field) - empirical)
    return residuals


def _stein_t0(
    kernel: RadialKernel,
    estimate: "DensityEstimate",
    trajectory: FlowTrajectory,
    x: np.ndarray,
    fields: Sequence[TestField],
) -> list[float]:
    beta0 = beta_coefficients(trajectory, estimate.target, 0)
    return _stein_residuals(kernel, estimate.knots, x, beta0, estimate.lam, fields)


def _stein_t1(
    kernel: RadialKernel,
    estimate: "DensityEstimate",
    trajectory: FlowTrajectory,
    fields: Sequence[TestField],
) -> list[float]:
    y = trajectory.terminal_particles
    scores = np.asarray(estimate.target.grad_log_density(y)).reshape(y.shape)
    return _stein_residuals(kernel, trajectory.terminal, y, scores, estimate.lam, fields)


def stein_residual_t0(estimate: "DensityEstimate", data, test_fields: Sequence[TestField]) -> list[float]:
    """lam <v_0, u>_V - E_n[grad log f(X) . u(X) + div u(X)] for each test field.

    grad log f(X_k) is beta_{k,0}, so for u in the diagnostic span the residual
    is <lam v_0 - D_0, u>_V.
    """
    kernel = estimate.kernel
    x = kernel.as_points(data)
    trajectory = _trajectory(kernel, estimate.knots, x, estimate.grid)
    return _stein_t0(kernel, estimate, trajectory, x, test_fields)


def stein_residual_t1(estimate: "DensityEstimate", data, test_fields: Sequence[TestField]) -> list[float]:
    """Stein residuals over the transformed sample phi_1(X_k) against the target score."""
    kernel = estimate.kernel
    x = kernel.as_points(data)
    trajectory = shoot(kernel, estimate.knots, x, estimate.grid, track_jacobian=False)
    return _stein_t1(kernel, estimate, trajectory, test_fields)


def el_residual_inner(
    estimate: "DensityEstimate", data, test_fields: Sequence[TestField], t: float = 0.0
) -> list[float]:
    """<lam v_t - D_t, u>_V by section inner products."""
    kernel = estimate.kernel
    x = kernel.as_points(data)
    trajectory = _trajectory(kernel, estimate.knots, x, estimate.grid)
    index = estimate.grid.index_of(t)
    beta = beta_coefficients(trajectory, estimate.target, index)
    sections, coef_v, coef_d = _residual_sections(
        kernel, trajectory.knots_at(index), trajectory.particle_path[index], beta, estimate.lam
    )
    coef = coef_v - coef_d
    out = []
    for field in test_fields:
        cross = kernel.section_inner_products(sections + [_section(field)])[:-1, -1]
        out.append(float(cross @ coef[:, field.direction]))
    return out


# ============================================================================
# Push-forward goodness of fit
# ============================================================================


def pushforward_gof(estimate: "DensityEstimate", data) -> GofResult:
    """Kolmogorov-Smirnov test of phi_1(X_k) against the target distribution."""
    if estimate.dim != 1:
        raise UnsupportedDimensionError(estimate.dim, "pushforward_gof")
    x = estimate.kernel.as_points(data)
    y = shoot(estimate.kernel, estimate.knots, x, estimate.grid, track_jacobian=False).terminal_particles
    result = stats.kstest(y[:, 0], estimate.target.cdf)
    return GofResult(ks_statistic=float(result.statistic), p_value=float(result.pvalue))
