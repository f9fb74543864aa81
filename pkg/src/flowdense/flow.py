"""Geodesic shooting of kernel vector-field flows.

The initial field v_0(x) = sum_k eta_k R(x, kappa_k) determines the whole
geodesic through the Hamiltonian equations

    d kappa_i / dt =  sum_j eta_j R(kappa_i, kappa_j)
    d eta_i / dt   = -sum_j (eta_i . eta_j) grad_1 R(kappa_i, kappa_j)

Tracked particles ride along with dX/dt = v_t(X), their Jacobians with
dDphi/dt = Dv_t(X) Dphi, and log det Dphi with d ell/dt = div v_t(X). All of
it is integrated jointly with classical RK4 on a uniform grid.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from flowdense.exceptions import DimensionMismatchError, FlowDivergenceError
from flowdense.kernel import RadialKernel

logger = logging.getLogger(__name__)

State = dict[str, np.ndarray]


@dataclass(frozen=True)
class KnotSystem:
    """N knots and N momentum vectors parameterising an initial velocity field."""

    knots: np.ndarray
    momenta: np.ndarray

    def __post_init__(self) -> None:
        knots = np.atleast_2d(np.asarray(self.knots, dtype=float))
        momenta = np.atleast_2d(np.asarray(self.momenta, dtype=float))
        if knots.size == 0:
            knots = knots.reshape(0, max(knots.shape[-1], 1))
            momenta = momenta.reshape(knots.shape)
        if knots.shape != momenta.shape:
            raise DimensionMismatchError(
                f"knots {knots.shape} and momenta {momenta.shape} must have equal shapes"
            )
        if not (np.all(np.isfinite(knots)) and np.all(np.isfinite(momenta))):
            raise ValueError("knot and momentum coordinates must be finite")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "momenta", momenta)

    @property
    def size(self) -> int:
        return self.knots.shape[0]

    @property
    def dim(self) -> int:
        return self.knots.shape[1]

    @classmethod
    def at_rest(cls, knots: np.ndarray) -> "KnotSystem":
        """Knots with all momenta zero."""
        knots = np.atleast_2d(np.asarray(knots, dtype=float))
        return cls(knots=knots, momenta=np.zeros_like(knots))

    def with_momenta(self, momenta: np.ndarray) -> "KnotSystem":
        return KnotSystem(knots=self.knots, momenta=np.asarray(momenta, dtype=float).reshape(self.knots.shape))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_S = 1."""

    steps: int = 20

    def __post_init__(self) -> None:
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def nodes(self) -> np.ndarray:
        nodes = np.linspace(0.0, 1.0, self.steps + 1)
        nodes[0], nodes[-1] = 0.0, 1.0
        return nodes

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    def index_of(self, t: float) -> int:
        """Index of the grid node closest to t."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t} outside [0, 1]")
        return int(round(t * self.steps))


@dataclass(frozen=True)
class FlowTrajectory:
    """Time-discretised record of a shot geodesic and the particles it carries."""

    grid: TimeGrid
    knot_path: np.ndarray
    momentum_path: np.ndarray
    particle_path: np.ndarray
    jacobian_path: np.ndarray | None
    logdet_path: np.ndarray
    logdet_gradient_path: np.ndarray | None = None

    @property
    def initial(self) -> KnotSystem:
        return KnotSystem(self.knot_path[0], self.momentum_path[0])

    @property
    def terminal(self) -> KnotSystem:
        return KnotSystem(self.knot_path[-1], self.momentum_path[-1])

    @property
    def terminal_particles(self) -> np.ndarray:
        return self.particle_path[-1]

    @property
    def terminal_logdet(self) -> np.ndarray:
        return self.logdet_path[-1]

    def knots_at(self, index: int) -> KnotSystem:
        return KnotSystem(self.knot_path[index], self.momentum_path[index])

    def norm_sq_path(self, kernel: RadialKernel) -> np.ndarray:
        """||v_t||_V^2 at every grid node."""
        return np.array([kernel.rkhs_norm_sq(self.knots_at(s)) for s in range(self.grid.steps + 1)])


@dataclass(frozen=True)
class KnotPerturbation:
    """Seed perturbation of the initial (eta, kappa); arrays (N, d) or batched (P, N, d)."""

    d_momenta: np.ndarray
    d_knots: np.ndarray | None = None


@dataclass(frozen=True)
class Sensitivity:
    """Directional derivatives of a shot flow along one or more seed perturbations."""

    particles: np.ndarray
    logdet: np.ndarray
    knot_path: np.ndarray
    momentum_path: np.ndarray
    terminal_particles: np.ndarray = field(repr=False)
    terminal_logdet: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class InverseResult:
    """Preimages under phi_1 with a per-point extrapolation flag."""

    points: np.ndarray
    extrapolated: np.ndarray
    residual: np.ndarray


# ----------------------------------------------------------------------
# field evaluation


def _split_points(kernel: RadialKernel, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 0 or (arr.ndim == 1 and arr.shape[0] == kernel.dim and (kernel.dim > 1 or arr.shape[0] == 1))
    return kernel.as_points(arr.reshape(1, -1) if single else arr), single


def _check_knots(kernel: RadialKernel, knots: KnotSystem) -> None:
    if knots.size and knots.dim != kernel.dim:
        raise DimensionMismatchError(f"knots have dimension {knots.dim}, kernel has {kernel.dim}")


def velocity(kernel: RadialKernel, knots: KnotSystem, x) -> np.ndarray:
    """v(x) = sum_k eta_k R(x, kappa_k); shape (d,) for one point, (m, d) for many."""
    _check_knots(kernel, knots)
    pts, single = _split_points(kernel, x)
    if knots.size == 0:
        out = np.zeros_like(pts)
    else:
        out = kernel.matrix(pts, knots.knots) @ knots.momenta
    return out[0] if single else out


def velocity_divergence(kernel: RadialKernel, knots: KnotSystem, x) -> np.ndarray | float:
    """div v(x) = sum_k eta_k . grad_x R(x, kappa_k)."""
    _check_knots(kernel, knots)
    pts, single = _split_points(kernel, x)
    if knots.size == 0:
        out = np.zeros(pts.shape[0])
    else:
        out = np.einsum("kjd,jd->k", kernel.grad_x_matrix(pts, knots.knots), knots.momenta)
    return float(out[0]) if single else out


def velocity_jacobian(kernel: RadialKernel, knots: KnotSystem, x) -> np.ndarray:
    """Spatial Jacobian Dv(x)_{ab} = sum_k eta_{k,a} d_b R(x, kappa_k)."""
    _check_knots(kernel, knots)
    pts, single = _split_points(kernel, x)
    if knots.size == 0:
        out = np.zeros((pts.shape[0], kernel.dim, kernel.dim))
    else:
        out = np.einsum("ja,kjb->kab", knots.momenta, kernel.grad_x_matrix(pts, knots.knots))
    return out[0] if single else out


# ----------------------------------------------------------------------
# right-hand sides


def _rates(kernel: RadialKernel, state: State) -> State:
    kappa, eta, x = state["kappa"], state["eta"], state["x"]
    rates: State = {}
    if kappa.shape[0] == 0:
        rates["kappa"] = np.zeros_like(kappa)
        rates["eta"] = np.zeros_like(eta)
        rates["x"] = np.zeros_like(x)
        rates["logdet"] = np.zeros(x.shape[0])
        if "jac" in state:
            rates["jac"] = np.zeros_like(state["jac"])
        return rates

    rates["kappa"] = kernel.matrix(kappa, kappa) @ eta
    rates["eta"] = -np.einsum("ij,ije->ie", eta @ eta.T, kernel.grad_x_matrix(kappa, kappa))
    rates["x"] = kernel.matrix(x, kappa) @ eta
    dv = np.einsum("ja,kjb->kab", eta, kernel.grad_x_matrix(x, kappa))
    rates["logdet"] = np.einsum("kaa->k", dv)
    if "jac" in state:
        rates["jac"] = dv @ state["jac"]
    return rates


def _tangent_rates(kernel: RadialKernel, state: State, tangent: State) -> State:
    """Linearisation of _rates at state applied to a batch of P tangent directions."""
    kappa, eta, x = state["kappa"], state["eta"], state["x"]
    dk, de, dx = tangent["kappa"], tangent["eta"], tangent["x"]
    if kappa.shape[0] == 0:
        return {key: np.zeros_like(value) for key, value in tangent.items()}

    r_kk = kernel.matrix(kappa, kappa)
    g_kk = kernel.grad_x_matrix(kappa, kappa)
    h_kk = kernel.hessian_xx_matrix(kappa, kappa)
    ip = eta @ eta.T

    # d kappa_i: sum_j de_j R_ij + eta_j (g_ij . (dk_i - dk_j))
    a_kk = np.einsum("jd,ije->ide", eta, g_kk)
    rate_k = (
        np.einsum("ij,pjd->pid", r_kk, de)
        + np.einsum("ide,pie->pid", a_kk, dk)
        - np.einsum("pij,jd->pid", np.einsum("ije,pje->pij", g_kk, dk), eta)
    )

    # d eta_i: -sum_j (de_i.eta_j + eta_i.de_j) g_ij + (eta_i.eta_j) H_ij (dk_i - dk_j)
    mixed = np.einsum("pid,jd->pij", de, eta) + np.einsum("id,pjd->pij", eta, de)
    weighted_h = ip[..., None, None] * h_kk
    rate_e = (
        -np.einsum("pij,ije->pie", mixed, g_kk)
        - np.einsum("ief,pif->pie", weighted_h.sum(axis=1), dk)
        + np.einsum("ijef,pjf->pie", weighted_h, dk)
    )

    # d X_k: sum_j de_j R_kj + eta_j (g_kj . (dX_k - dk_j))
    r_xk = kernel.matrix(x, kappa)
    g_xk = kernel.grad_x_matrix(x, kappa)
    h_xk = kernel.hessian_xx_matrix(x, kappa)
    dv = np.einsum("jd,kje->kde", eta, g_xk)
    rate_x = (
        np.einsum("kj,pjd->pkd", r_xk, de)
        + np.einsum("kde,pke->pkd", dv, dx)
        - np.einsum("pkj,jd->pkd", np.einsum("kje,pje->pkj", g_xk, dk), eta)
    )

    # d ell_k: sum_j de_j . g_kj + eta_j . H_kj (dX_k - dk_j)
    eta_h = np.einsum("jd,kjde->kje", eta, h_xk)
    rate_l = (
        np.einsum("pjd,kjd->pk", de, g_xk)
        + np.einsum("ke,pke->pk", eta_h.sum(axis=1), dx)
        - np.einsum("kje,pje->pk", eta_h, dk)
    )
    return {"kappa": rate_k, "eta": rate_e, "x": rate_x, "logdet": rate_l}


def _axpy(base: State, scale: float, incr: State) -> State:
    return {key: base[key] + scale * incr[key] for key in base}


def _combine(base: State, h: float, k1: State, k2: State, k3: State, k4: State) -> State:
    return {key: base[key] + (h / 6.0) * (k1[key] + 2.0 * k2[key] + 2.0 * k3[key] + k4[key]) for key in base}


def _all_finite(state: State) -> bool:
    return all(np.all(np.isfinite(value)) for value in state.values())


def _integrate(
    kernel: RadialKernel,
    state: State,
    grid: TimeGrid,
    tangent: State | None = None,
    reverse: bool = False,
    on_node: Callable[[int, State, State | None], None] | None = None,
) -> tuple[State, State | None]:
    """RK4 over the grid; the tangent rides the same stages, giving the exact derivative of the discrete map."""
    h = -grid.dt if reverse else grid.dt
    if on_node is not None:
        on_node(0, state, tangent)
    for step in range(grid.steps):
        k1 = _rates(kernel, state)
        s2 = _axpy(state, 0.5 * h, k1)
        k2 = _rates(kernel, s2)
        s3 = _axpy(state, 0.5 * h, k2)
        k3 = _rates(kernel, s3)
        s4 = _axpy(state, h, k3)
        k4 = _rates(kernel, s4)
        if tangent is not None:
            t1 = _tangent_rates(kernel, state, tangent)
            t2 = _tangent_rates(kernel, s2, _axpy(tangent, 0.5 * h, t1))
            t3 = _tangent_rates(kernel, s3, _axpy(tangent, 0.5 * h, t2))
            t4 = _tangent_rates(kernel, s4, _axpy(tangent, h, t3))
            tangent = _combine(tangent, h, t1, t2, t3, t4)
        state = _combine(state, h, k1, k2, k3, k4)
        if not _all_finite(state) or (tangent is not None and not _all_finite(tangent)):
            raise FlowDivergenceError(step + 1)
        if on_node is not None:
            on_node(step + 1, state, tangent)
    return state, tangent


def _initial_state(kernel: RadialKernel, initial: KnotSystem, particles, track_jacobian: bool) -> State:
    _check_knots(kernel, initial)
    pts = np.asarray(particles, dtype=float)
    pts = np.zeros((0, kernel.dim)) if pts.size == 0 else kernel.as_points(pts)
    knots = initial.knots if initial.size else np.zeros((0, kernel.dim))
    momenta = initial.momenta if initial.size else np.zeros((0, kernel.dim))
    state: State = {
        "kappa": knots.copy(),
        "eta": momenta.copy(),
        "x": pts.copy(),
        "logdet": np.zeros(pts.shape[0]),
    }
    if track_jacobian:
        state["jac"] = np.broadcast_to(np.eye(kernel.dim), (pts.shape[0], kernel.dim, kernel.dim)).copy()
    return state


# ----------------------------------------------------------------------
# public operations


def shoot(
    kernel: RadialKernel,
    initial: KnotSystem,
    particles,
    grid: TimeGrid | None = None,
    *,
    track_jacobian: bool = True,
    logdet_gradient_step: float | None = None,
) -> FlowTrajectory:
    """Integrate the geodesic determined by `initial`, carrying `particles` along.

    With logdet_gradient_step = h, auxiliary particles at X_k +/- h e_i ride in
    the same pass and the trajectory exposes grad_x log det Dphi_{0,t}(X_k)
    by central differences.
    """
    grid = grid or TimeGrid()
    base = np.asarray(particles, dtype=float)
    base = np.zeros((0, kernel.dim)) if base.size == 0 else kernel.as_points(base)
    n = base.shape[0]
    carried = base
    if logdet_gradient_step is not None:
        if logdet_gradient_step <= 0:
            raise ValueError("logdet_gradient_step must be positive")
        offsets = logdet_gradient_step * np.eye(kernel.dim)
        carried = np.concatenate(
            [base] + [base + offsets[i] for i in range(kernel.dim)] + [base - offsets[i] for i in range(kernel.dim)]
        )

    state = _initial_state(kernel, initial, carried, track_jacobian)
    records: list[State] = []
    _integrate(kernel, state, grid, on_node=lambda _, s, __: records.append(s))

    logdet_all = np.stack([r["logdet"] for r in records])
    gradient_path = None
    if logdet_gradient_step is not None:
        d = kernel.dim
        plus = np.stack([logdet_all[:, (1 + i) * n : (2 + i) * n] for i in range(d)], axis=-1)
        minus = np.stack([logdet_all[:, (1 + d + i) * n : (2 + d + i) * n] for i in range(d)], axis=-1)
        gradient_path = (plus - minus) / (2.0 * logdet_gradient_step)

    return FlowTrajectory(
        grid=grid,
        knot_path=np.stack([r["kappa"] for r in records]),
        momentum_path=np.stack([r["eta"] for r in records]),
        particle_path=np.stack([r["x"][:n] for r in records]),
        jacobian_path=np.stack([r["jac"][:n] for r in records]) if track_jacobian else None,
        logdet_path=logdet_all[:, :n],
        logdet_gradient_path=gradient_path,
    )


def sensitivity(
    kernel: RadialKernel,
    initial: KnotSystem,
    particles,
    grid: TimeGrid | None,
    seed_perturbation: KnotPerturbation,
) -> Sensitivity:
    """Directional derivatives of phi_1(X_k), log det Dphi_1(X_k), kappa(t), eta(t) along the seed.

    A batched seed of shape (P, N, d) yields P directions from one linearised pass.
    """
    grid = grid or TimeGrid()
    d_eta = np.asarray(seed_perturbation.d_momenta, dtype=float)
    batched = d_eta.ndim == 3
    if not batched:
        d_eta = d_eta[None]
    d_kappa = (
        np.zeros_like(d_eta)
        if seed_perturbation.d_knots is None
        else np.asarray(seed_perturbation.d_knots, dtype=float).reshape(d_eta.shape)
    )
    if d_eta.shape[1:] != initial.knots.shape:
        raise DimensionMismatchError(
            f"perturbation shape {d_eta.shape[1:]} does not match knots {initial.knots.shape}"
        )

    state = _initial_state(kernel, initial, particles, track_jacobian=False)
    p, n = d_eta.shape[0], state["x"].shape[0]
    tangent: State = {
        "kappa": d_kappa.copy(),
        "eta": d_eta.copy(),
        "x": np.zeros((p, n, kernel.dim)),
        "logdet": np.zeros((p, n)),
    }
    knot_path: list[np.ndarray] = []
    momentum_path: list[np.ndarray] = []

    def record(_: int, __: State, tan: State | None) -> None:
        knot_path.append(tan["kappa"])
        momentum_path.append(tan["eta"])

    final, final_tangent = _integrate(kernel, state, grid, tangent=tangent, on_node=record)

    def unbatch(arr: np.ndarray, axis: int = 0) -> np.ndarray:
        return arr if batched else np.take(arr, 0, axis=axis)

    return Sensitivity(
        particles=unbatch(final_tangent["x"]),
        logdet=unbatch(final_tangent["logdet"]),
        knot_path=unbatch(np.stack(knot_path), axis=1),
        momentum_path=unbatch(np.stack(momentum_path), axis=1),
        terminal_particles=final["x"],
        terminal_logdet=final["logdet"],
    )


def inverse_map(
    kernel: RadialKernel,
    trajectory: FlowTrajectory,
    y,
    *,
    tol: float = 1e-6,
    max_newton: int = 25,
) -> InverseResult:
    """Solve phi_1(x) = y for each row of y.

    Reverse-time integration from the terminal knot state gives the starting
    point; Newton steps on the discrete forward map remove the integrator's
    asymmetry so that phi_1(x) matches y to well below `tol`.
    """
    targets = np.asarray(y, dtype=float)
    targets = np.zeros((0, kernel.dim)) if targets.size == 0 else kernel.as_points(targets)
    m = targets.shape[0]
    grid = trajectory.grid
    initial = trajectory.initial
    if m == 0:
        return InverseResult(points=targets.copy(), extrapolated=np.zeros(0, dtype=bool), residual=np.zeros(0))

    backward = _initial_state(kernel, trajectory.terminal, targets, track_jacobian=False)
    guess, _ = _integrate(kernel, backward, grid, reverse=True)
    x = guess["x"]

    residual = np.full(m, np.inf)
    for _ in range(max_newton):
        forward = shoot(kernel, initial, x, grid, track_jacobian=True)
        gap = forward.terminal_particles - targets
        residual = np.linalg.norm(gap, axis=1)
        active = residual > 1e-12 * (1.0 + np.linalg.norm(targets, axis=1))
        if not active.any():
            break
        step = np.linalg.solve(forward.jacobian_path[-1][active], gap[active][..., None])[..., 0]
        x = x.copy()
        x[active] -= step
        if not np.all(np.isfinite(x)):
            x = np.where(np.isfinite(x), x, guess["x"])
            break

    extrapolated = ~(residual <= tol)
    if extrapolated.any():
        logger.warning("inverse map did not converge for %d of %d points", int(extrapolated.sum()), m)
    return InverseResult(points=x, extrapolated=extrapolated, residual=residual)
