"""Penalised maximum likelihood over geodesic kernel flows.

The estimate is f(x) = exp(H(phi_1(x))) det Dphi_1(x), where phi_1 is the
time-one map of the geodesic shot from a knot system. Fitting maximises

    E(eta) = (1/n) sum_k [log det Dphi_1(X_k) + H(phi_1(X_k))] - (lam/2) ||v_0||_V^2

over the initial momenta (and optionally the knot positions).
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from flowdense import diagnostics
from flowdense.exceptions import DimensionMismatchError, FlowDivergenceError, OptimizerStalledError
from flowdense.flow import (
    FlowTrajectory,
    KnotPerturbation,
    KnotSystem,
    TimeGrid,
    inverse_map,
    sensitivity,
    shoot,
)
from flowdense.kernel import RadialKernel
from flowdense.models import FitConfig, FitReport, KnotSpec, OptimizerConfig
from flowdense.target import TargetDensity

logger = logging.getLogger(__name__)

# Gram eigenvalues below this fraction of the largest are dropped from the momentum chart.
EIGEN_FLOOR = 1e-10
# Curvature pairs with s.y below this fraction of |s||y| are not stored.
CURVATURE_FLOOR = 1e-10
# Relative size below which a predicted increase is lost in round-off.
ROUNDOFF_FLOOR = 1e-13


@dataclass(frozen=True)
class EnergyGradient:
    energy: float
    momenta: np.ndarray
    knots: np.ndarray | None = None

    def sup_norm(self) -> float:
        parts = [np.abs(self.momenta).ravel()]
        if self.knots is not None:
            parts.append(np.abs(self.knots).ravel())
        values = np.concatenate(parts)
        return float(values.max()) if values.size else 0.0


@dataclass(frozen=True)
class DensityEstimate:
    """A fitted (kernel, knot system, target) triple."""

    kernel: RadialKernel
    knots: KnotSystem
    target: TargetDensity
    grid: TimeGrid
    lam: float
    data: np.ndarray | None = None
    trajectory: FlowTrajectory | None = None
    report: FitReport | None = None

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def flow(self, particles=None, **kwargs) -> FlowTrajectory:
        """Shoot the fitted geodesic carrying `particles` (none by default)."""
        pts = np.zeros((0, self.dim)) if particles is None else particles
        return shoot(self.kernel, self.knots, pts, self.grid, **kwargs)


@dataclass(frozen=True)
class EstimateSample:
    points: np.ndarray
    extrapolated: np.ndarray


def _data(kernel: RadialKernel, data) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.size == 0:
        raise ValueError("at least one observation is required")
    return kernel.as_points(arr)


def _check_state(kernel: RadialKernel, knots: KnotSystem) -> None:
    if knots.size and knots.dim != kernel.dim:
        raise DimensionMismatchError(f"knots have dimension {knots.dim}, kernel has {kernel.dim}")


# ============================================================================
# Energy and gradient
# ============================================================================


def _likelihood_term(trajectory: FlowTrajectory, target: TargetDensity) -> float:
    values = trajectory.terminal_logdet + target.log_density(trajectory.terminal_particles)
    return float(np.mean(values))


def energy(
    kernel: RadialKernel,
    knots: KnotSystem,
    data,
    target: TargetDensity,
    config: FitConfig,
) -> float:
    """Penalised log-likelihood E_lam at the given initial knot system."""
    _check_state(kernel, knots)
    x = _data(kernel, data)
    trajectory = shoot(kernel, knots, x, config.grid, track_jacobian=False)
    return _likelihood_term(trajectory, target) - 0.5 * config.lam * kernel.rkhs_norm_sq(knots)


def energy_grad(
    kernel: RadialKernel,
    knots: KnotSystem,
    data,
    target: TargetDensity,
    config: FitConfig,
) -> EnergyGradient:
    """Exact gradient of `energy` from one batched linearised integration.

    One tangent direction per coordinate of eta (and of kappa when knot
    positions are optimised); the penalty part is differentiated in closed form.
    """
    _check_state(kernel, knots)
    x = _data(kernel, data)
    like, like_eta, like_kappa = _likelihood_grad(kernel, knots, x, target, config)
    return _energy_gradient(kernel, knots, like, like_eta, like_kappa, config.lam)


def _likelihood_grad(
    kernel: RadialKernel,
    knots: KnotSystem,
    x: np.ndarray,
    target: TargetDensity,
    config: FitConfig,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    n = x.shape[0]
    size, dim = knots.knots.shape
    width = size * dim
    unit = np.eye(width).reshape(width, size, dim)
    zeros = np.zeros_like(unit)
    if config.optimize_knot_positions:
        d_eta = np.concatenate([unit, zeros])
        d_kappa = np.concatenate([zeros, unit])
    else:
        d_eta, d_kappa = unit, zeros

    sens = sensitivity(kernel, knots, x, config.grid, KnotPerturbation(d_momenta=d_eta, d_knots=d_kappa))
    y = sens.terminal_particles
    score = target.grad_log_density(y).reshape(n, dim)
    like_grad = (sens.logdet.sum(axis=1) + np.einsum("pkd,kd->p", sens.particles, score)) / n
    like = float(np.mean(sens.terminal_logdet + target.log_density(y)))
    like_kappa = like_grad[width:].reshape(size, dim) if config.optimize_knot_positions else None
    return like, like_grad[:width].reshape(size, dim), like_kappa


def _energy_gradient(
    kernel: RadialKernel,
    knots: KnotSystem,
    like: float,
    like_eta: np.ndarray,
    like_kappa: np.ndarray | None,
    lam: float,
) -> EnergyGradient:
    """Adds the closed-form penalty part to the likelihood value and gradients."""
    eta = knots.momenta
    if knots.size == 0:
        return EnergyGradient(energy=like, momenta=like_eta, knots=like_kappa)
    gram = kernel.gram(knots.knots)
    norm_sq = max(float(np.einsum("id,ij,jd->", eta, gram, eta)), 0.0)
    grad_kappa = None
    if like_kappa is not None:
        g_kk = kernel.grad_x_matrix(knots.knots, knots.knots)
        grad_kappa = like_kappa - lam * np.einsum("ij,ije->ie", eta @ eta.T, g_kk)
    return EnergyGradient(energy=like - 0.5 * lam * norm_sq, momenta=like_eta - lam * gram @ eta, knots=grad_kappa)


# ============================================================================
# Knot placement
# ============================================================================


def make_knots(strategy: KnotSpec | str, data, kernel: RadialKernel, config: FitConfig) -> KnotSystem:
    """Initial knot system for a placement strategy, with all momenta zero.

    augmented_3n places knots at X_k and X_k +/- (delta/2) e_i for every axis i,
    which is the 3n pattern on the line.
    """
    spec = strategy if isinstance(strategy, KnotSpec) else config.knots.model_copy(update={"strategy": strategy})
    x = _data(kernel, data)
    n = x.shape[0]
    if spec.strategy == "at_data":
        points = x
    elif spec.strategy == "augmented_3n":
        offsets = 0.5 * spec.delta * np.eye(kernel.dim)
        points = np.concatenate([x] + [x + o for o in offsets] + [x - o for o in offsets])
    elif spec.strategy == "subsample":
        count = spec.n_knots
        distinct = np.unique(x, axis=0, return_index=True)[1]
        if count is None or count > distinct.size:
            raise ValueError(f"cannot draw {count} distinct knots from {distinct.size} distinct data points")
        rng = np.random.default_rng(config.seed)
        chosen = np.sort(rng.choice(np.sort(distinct), size=count, replace=False))
        points = x[chosen]
    elif spec.strategy == "explicit":
        points = kernel.as_points(spec.points)
    else:
        raise ValueError(f"unknown knot strategy {spec.strategy!r}")
    logger.debug("placed %d knots (%s) for %d observations", points.shape[0], spec.strategy, n)
    return KnotSystem.at_rest(points)


# ============================================================================
# Optimizer
# ============================================================================


@dataclass(frozen=True)
class MomentumChart:
    """Affine coordinates eta = origin + basis @ z for the momenta of fixed knots.

    The squared RKHS norm becomes const + 2 <offset, z> + <z, metric @ z>.
    With the rkhs metric the basis whitens the Gram matrix, so `metric` is the
    identity and nearly coincident knots no longer slow the ascent down.
    """

    origin: np.ndarray
    basis: np.ndarray
    offset: np.ndarray
    const: float
    metric: np.ndarray

    @classmethod
    def build(cls, kernel: RadialKernel, knots: KnotSystem, metric: str = "rkhs") -> "MomentumChart":
        eta = knots.momenta
        if knots.size == 0:
            empty = np.zeros((0, 0))
            return cls(origin=eta, basis=empty, offset=np.zeros((0, kernel.dim)), const=0.0, metric=empty)
        gram = kernel.gram(knots.knots)
        const = float(np.einsum("id,ij,jd->", eta, gram, eta))
        if metric == "euclidean":
            return cls(origin=eta, basis=np.eye(knots.size), offset=gram @ eta, const=const, metric=gram)
        values, vectors = eigh(gram)
        keep = values > EIGEN_FLOOR * values.max()
        root = np.sqrt(values[keep])
        if not keep.all():
            logger.debug("dropped %d of %d Gram directions below round-off", int((~keep).sum()), knots.size)
        return cls(
            origin=eta,
            basis=vectors[:, keep] / root,
            offset=root[:, None] * (vectors[:, keep].T @ eta),
            const=const,
            metric=np.eye(int(keep.sum())),
        )

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def momenta(self, z: np.ndarray) -> np.ndarray:
        return self.origin + self.basis @ z

    def norm_sq(self, z: np.ndarray) -> float:
        return self.const + 2.0 * float(np.sum(self.offset * z)) + float(np.sum(z * (self.metric @ z)))


class _Objective:
    """The energy over flat optimiser coordinates u = (z, kappa); kappa only when knots move."""

    def __init__(
        self,
        kernel: RadialKernel,
        start: KnotSystem,
        x: np.ndarray,
        target: TargetDensity,
        config: FitConfig,
    ):
        self.kernel = kernel
        self.x = x
        self.target = target
        self.config = config
        self.kappa0 = start.knots
        self.chart = MomentumChart.build(kernel, start, config.optimizer.metric)
        self.split = self.chart.rank * kernel.dim

    def start(self) -> np.ndarray:
        z = np.zeros(self.split)
        return np.concatenate([z, self.kappa0.ravel()]) if self.config.optimize_knot_positions else z

    def state(self, u: np.ndarray) -> tuple[np.ndarray, KnotSystem]:
        z = u[: self.split].reshape(self.chart.rank, self.kernel.dim)
        kappa = u[self.split :].reshape(self.kappa0.shape) if self.config.optimize_knot_positions else self.kappa0
        return z, KnotSystem(knots=kappa, momenta=self.chart.momenta(z))

    def _norm_sq(self, z: np.ndarray, state: KnotSystem) -> float:
        if self.config.optimize_knot_positions:
            return self.kernel.rkhs_norm_sq(state)
        return self.chart.norm_sq(z)

    def value(self, u: np.ndarray) -> float:
        z, state = self.state(u)
        trajectory = shoot(self.kernel, state, self.x, self.config.grid, track_jacobian=False)
        return _likelihood_term(trajectory, self.target) - 0.5 * self.config.lam * self._norm_sq(z, state)

    def evaluate(self, u: np.ndarray) -> tuple[float, np.ndarray, EnergyGradient, KnotSystem]:
        """Value and gradient in u, plus the gradient in (eta, kappa) used for stopping."""
        z, state = self.state(u)
        like, like_eta, like_kappa = _likelihood_grad(self.kernel, state, self.x, self.target, self.config)
        grad = _energy_gradient(self.kernel, state, like, like_eta, like_kappa, self.config.lam)
        if self.config.optimize_knot_positions:
            flat = np.concatenate([(self.chart.basis.T @ grad.momenta).ravel(), grad.knots.ravel()])
            return grad.energy, flat, grad, state
        lam = self.config.lam
        value = like - 0.5 * lam * self.chart.norm_sq(z)
        g_z = self.chart.basis.T @ like_eta - lam * (self.chart.offset + self.chart.metric @ z)
        return value, g_z.ravel(), grad, state


def _two_loop(grad: np.ndarray, memory: deque, h_scale: float) -> np.ndarray:
    """Limited-memory inverse Hessian of -E applied to the ascent gradient."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        alpha = rho * float(s @ q)
        q -= alpha * y
        alphas.append(alpha)
    r = h_scale * q
    for (s, y, rho), alpha in zip(memory, reversed(alphas), strict=True):
        beta = rho * float(y @ r)
        r += (alpha - beta) * s
    return r


def _line_search(
    objective: _Objective,
    u: np.ndarray,
    value: float,
    direction: np.ndarray,
    slope: float,
    first_step: float,
    opt: OptimizerConfig,
) -> tuple[float, np.ndarray, float] | None:
    """Armijo backtracking; a diverging trial flow counts as -inf."""
    step = first_step
    for _ in range(opt.max_backtracks):
        trial = u + step * direction
        try:
            trial_value = objective.value(trial)
        except FlowDivergenceError:
            trial_value = -np.inf
        if trial_value >= value + opt.armijo_c * step * slope:
            return step, trial, trial_value
        step *= opt.backtrack_factor
    return None


def _report(
    kernel: RadialKernel,
    state: KnotSystem,
    x: np.ndarray,
    target: TargetDensity,
    config: FitConfig,
    value: float,
    grad: EnergyGradient,
    trace: dict[str, list[float]],
    iterations: int,
    stopped: str,
) -> FitReport:
    try:
        residual = diagnostics.relative_el_residual(kernel, state, x, target, config.grid, config.lam)
    except FlowDivergenceError:
        logger.warning("Euler-Lagrange residual could not be evaluated at the final state")
        residual = None
    return FitReport(
        final_energy=value,
        gradient_norm=grad.sup_norm(),
        el_residual=residual,
        iterations=iterations,
        converged=stopped == "gradient",
        stopped=stopped,
        energy_trace=trace["energy"],
        gradient_norm_trace=trace["gradient"],
        step_trace=trace["step"],
    )


def _estimate(
    kernel: RadialKernel,
    state: KnotSystem,
    x: np.ndarray,
    target: TargetDensity,
    config: FitConfig,
    report: FitReport,
) -> DensityEstimate:
    trajectory = shoot(kernel, state, x, config.grid, track_jacobian=True)
    return DensityEstimate(
        kernel=kernel,
        knots=state,
        target=target,
        grid=config.grid,
        lam=config.lam,
        data=x,
        trajectory=trajectory,
        report=report,
    )


def fit_pmle(
    data,
    target: TargetDensity,
    kernel: RadialKernel,
    config: FitConfig,
    initial: KnotSystem | None = None,
) -> DensityEstimate:
    """Fit the penalised maximum likelihood flow by line-search ascent.

    The momenta are moved in whitened coordinates of the Gram matrix and, by
    default, along limited-memory quasi-Newton directions. Stopping is on the
    sup norm of dE/deta (and dE/dkappa) relative to 1 + |E|.

    Args:
        data: (n, d) observations.
        target: Target density exp(H) the flow pushes the data onto.
        kernel: Kernel generating the vector-field space.
        config: Fit configuration.
        initial: Warm start; defaults to `make_knots` with zero momenta.

    Returns:
        DensityEstimate carrying the fit report and training trajectory.

    Raises:
        OptimizerStalledError: If the line search exhausts its backtracks,
            also after a restart from the plain gradient; the best estimate
            so far rides on the exception.
        FlowDivergenceError: If the flow at the starting state is not finite.
    """
    x = _data(kernel, data)
    opt = config.optimizer
    start = initial if initial is not None else make_knots(config.knots, x, kernel, config)
    _check_state(kernel, start)

    objective = _Objective(kernel, start, x, target, config)
    u = objective.start()
    value, flat, grad, state = objective.evaluate(u)
    trace: dict[str, list[float]] = {"energy": [value], "gradient": [grad.sup_norm()], "step": []}
    memory: deque[tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=opt.memory)
    h_scale = 1.0 / config.lam
    first_step = opt.initial_step if opt.initial_step is not None else 1.0
    stopped = "max_iters"
    iterations = 0

    while True:
        if grad.sup_norm() <= opt.gradient_tol * (1.0 + abs(value)):
            stopped = "gradient"
            break
        if iterations >= opt.max_iters:
            break

        direction = _two_loop(flat, memory, h_scale)
        slope = float(flat @ direction)
        if slope <= 0.0 and memory:
            memory.clear()
            h_scale = 1.0 / config.lam
            direction = h_scale * flat
            slope = float(flat @ direction)
        if first_step * slope <= ROUNDOFF_FLOOR * (1.0 + abs(value)):
            logger.info("predicted increase below round-off at iteration %d; stopping", iterations)
            stopped = "roundoff"
            break

        found = _line_search(objective, u, value, direction, slope, first_step, opt)
        if found is None and memory:
            logger.debug("no ascent along the quasi-Newton direction at iteration %d; restarting", iterations)
            memory.clear()
            h_scale = 1.0 / config.lam
            direction = h_scale * flat
            slope = float(flat @ direction)
            found = _line_search(objective, u, value, direction, slope, first_step, opt)
        if found is None:
            report = _report(kernel, state, x, target, config, value, grad, trace, iterations, "stalled")
            best = _estimate(kernel, state, x, target, config, report)
            raise OptimizerStalledError(
                f"line search found no ascent step after {opt.max_backtracks} backtracks "
                f"at iteration {iterations}",
                best_estimate=best,
            )

        step, u_next, value = found
        _, flat_next, grad, state = objective.evaluate(u_next)
        if opt.method == "lbfgs":
            s = u_next - u
            y = flat - flat_next
            ys = float(s @ y)
            if ys > CURVATURE_FLOOR * np.linalg.norm(s) * np.linalg.norm(y):
                memory.append((s, y, 1.0 / ys))
                h_scale = ys / float(y @ y)
        u, flat = u_next, flat_next
        iterations += 1
        trace["energy"].append(value)
        trace["gradient"].append(grad.sup_norm())
        trace["step"].append(step)
        logger.debug("iter %d energy=%.12g |grad|=%.3e step=%.3e", iterations, value, grad.sup_norm(), step)

    report = _report(kernel, state, x, target, config, value, grad, trace, iterations, stopped)
    logger.info(
        "fit finished after %d iterations (%s): energy=%.10g el_residual=%s",
        iterations,
        stopped,
        report.final_energy,
        report.el_residual,
    )
    return _estimate(kernel, state, x, target, config, report)


# ============================================================================
# Evaluating and sampling the estimate
# ============================================================================


def log_density_estimate(estimate: DensityEstimate, x) -> np.ndarray | float:
    """log f(x) = H(phi_1(x)) + log det Dphi_1(x); scalar for a single point."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 0 or (arr.ndim == 1 and arr.shape[0] == estimate.dim and (estimate.dim > 1 or arr.size == 1))
    pts = estimate.kernel.as_points(arr)
    trajectory = estimate.flow(pts, track_jacobian=False)
    values = estimate.target.log_density(trajectory.terminal_particles) + trajectory.terminal_logdet
    values = np.atleast_1d(values)
    return float(values[0]) if single else values


def density_estimate(estimate: DensityEstimate, x) -> np.ndarray | float:
    """f(x) = exp(H(phi_1(x))) det Dphi_1(x)."""
    return np.exp(log_density_estimate(estimate, x))


def sample_estimate(estimate: DensityEstimate, m: int, seed: int | None = None) -> EstimateSample:
    """Draw m points from the estimate by pulling target samples back through phi_1."""
    y = estimate.target.sample(m, seed)
    result = inverse_map(estimate.kernel, estimate.flow(), y)
    if result.extrapolated.any():
        logger.warning("%d of %d samples lie outside the reliably invertible range", int(result.extrapolated.sum()), m)
    return EstimateSample(points=result.points, extrapolated=result.extrapolated)


def knot_summary(knots: KnotSystem) -> dict[str, float]:
    """Scalar summary of a knot system for reports."""
    sup = float(np.abs(knots.momenta).max()) if knots.size else 0.0
    return {"knot_count": knots.size, "momentum_sup": sup}
