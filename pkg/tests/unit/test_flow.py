"""Unit tests for geodesic shooting, sensitivities and the inverse map."""

import numpy as np
import pytest
from scipy import optimize

from flowdense.exceptions import DimensionMismatchError
from flowdense.flow import (
    KnotPerturbation,
    KnotSystem,
    TimeGrid,
    inverse_map,
    sensitivity,
    shoot,
    velocity,
    velocity_divergence,
    velocity_jacobian,
)
from flowdense.kernel import GaussianKernel


@pytest.fixture
def kernel() -> GaussianKernel:
    return GaussianKernel(sigma=0.3)


@pytest.fixture
def knots() -> KnotSystem:
    return KnotSystem([[0.0], [0.4], [0.9]], [[0.15], [-0.1], [0.05]])


@pytest.fixture
def particles() -> np.ndarray:
    return np.linspace(-0.2, 1.1, 7).reshape(-1, 1)


# ============================================================================
# Value types
# ============================================================================


class TestKnotSystem:
    """Tests for the knot system value type."""

    def test_at_rest_has_zero_momenta(self):
        system = KnotSystem.at_rest([[0.1], [0.2]])

        assert system.size == 2
        assert system.dim == 1
        np.testing.assert_array_equal(system.momenta, np.zeros((2, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            KnotSystem([[0.0], [1.0]], [[0.0]])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            KnotSystem([[0.0]], [[np.nan]])

    def test_with_momenta(self, knots: KnotSystem):
        moved = knots.with_momenta([1.0, 2.0, 3.0])

        np.testing.assert_array_equal(moved.knots, knots.knots)
        np.testing.assert_array_equal(moved.momenta, [[1.0], [2.0], [3.0]])


class TestTimeGrid:
    """Tests for the uniform time grid."""

    def test_nodes_end_exactly(self):
        grid = TimeGrid(steps=7)

        assert grid.nodes[0] == 0.0
        assert grid.nodes[-1] == 1.0
        assert len(grid.nodes) == 8

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            TimeGrid(steps=0)

    def test_index_of(self):
        grid = TimeGrid(steps=20)

        assert grid.index_of(0.0) == 0
        assert grid.index_of(0.5) == 10
        assert grid.index_of(1.0) == 20

    def test_index_of_out_of_range(self):
        with pytest.raises(ValueError):
            TimeGrid().index_of(1.5)


# ============================================================================
# Field evaluation
# ============================================================================


class TestVelocity:
    """Tests for the velocity field and its derivatives."""

    def test_single_knot_value(self, kernel: GaussianKernel):
        system = KnotSystem([[0.0]], [[2.0]])

        np.testing.assert_allclose(velocity(kernel, system, 0.0), [2.0])

    def test_no_knots_is_zero(self, kernel: GaussianKernel):
        system = KnotSystem(np.zeros((0, 1)), np.zeros((0, 1)))

        np.testing.assert_array_equal(velocity(kernel, system, [[0.1], [0.2]]), np.zeros((2, 1)))

    def test_divergence_matches_finite_differences(self, kernel: GaussianKernel, knots: KnotSystem):
        h = 1e-6
        for x in (-0.1, 0.2, 0.55, 1.0):
            fd = (velocity(kernel, knots, x + h)[0] - velocity(kernel, knots, x - h)[0]) / (2 * h)
            assert velocity_divergence(kernel, knots, x) == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_jacobian_in_two_dimensions(self):
        kernel = GaussianKernel(sigma=0.5, dim=2)
        rng = np.random.default_rng(5)
        system = KnotSystem(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
        x = np.array([0.1, -0.2])
        h = 1e-6
        fd = np.stack(
            [(velocity(kernel, system, x + h * e) - velocity(kernel, system, x - h * e)) / (2 * h) for e in np.eye(2)],
            axis=1,
        )

        np.testing.assert_allclose(velocity_jacobian(kernel, system, x), fd, atol=1e-7)
        assert velocity_divergence(kernel, system, x) == pytest.approx(np.trace(fd), abs=1e-7)

    def test_knot_dimension_mismatch(self, kernel: GaussianKernel):
        system = KnotSystem([[0.0, 0.0]], [[1.0, 0.0]])

        with pytest.raises(DimensionMismatchError):
            velocity(kernel, system, 0.0)


# ============================================================================
# Shooting
# ============================================================================


class TestShoot:
    """Tests for geodesic shooting."""

    def test_zero_momenta_is_identity(self, kernel: GaussianKernel, particles: np.ndarray):
        trajectory = shoot(kernel, KnotSystem.at_rest([[0.0], [0.5]]), particles)

        np.testing.assert_array_equal(trajectory.terminal_particles, particles)
        np.testing.assert_array_equal(trajectory.terminal_logdet, np.zeros(len(particles)))
        np.testing.assert_array_equal(trajectory.jacobian_path[-1], np.ones((len(particles), 1, 1)))

    def test_single_knot_translates_at_constant_speed(self, kernel: GaussianKernel):
        trajectory = shoot(kernel, KnotSystem([[0.2]], [[0.3]]), [[0.2]])

        np.testing.assert_allclose(trajectory.terminal.knots, [[0.5]], atol=1e-12)
        np.testing.assert_allclose(trajectory.terminal.momenta, [[0.3]], atol=1e-12)
        np.testing.assert_allclose(trajectory.terminal_particles, [[0.5]], atol=1e-12)

    def test_path_shapes(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        trajectory = shoot(kernel, knots, particles, TimeGrid(steps=10))

        assert trajectory.knot_path.shape == (11, 3, 1)
        assert trajectory.momentum_path.shape == (11, 3, 1)
        assert trajectory.particle_path.shape == (11, 7, 1)
        assert trajectory.jacobian_path.shape == (11, 7, 1, 1)
        assert trajectory.logdet_path.shape == (11, 7)

    def test_norm_conserved_along_geodesic(self, kernel: GaussianKernel, knots: KnotSystem):
        norms = shoot(kernel, knots, np.zeros((0, 1)), TimeGrid(steps=40)).norm_sq_path(kernel)

        np.testing.assert_allclose(norms, norms[0], rtol=1e-6)

    def test_logdet_matches_jacobian(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        trajectory = shoot(kernel, knots, particles, TimeGrid(steps=40))
        jac = trajectory.jacobian_path[-1][:, 0, 0]

        assert np.all(jac > 0)
        np.testing.assert_allclose(trajectory.terminal_logdet, np.log(jac), atol=1e-6)

    def test_terminal_map_is_monotone(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        y = shoot(kernel, knots, particles).terminal_particles[:, 0]

        assert np.all(np.diff(y) > 0)

    def test_fourth_order_convergence(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        """Halving the step cuts the particle error by roughly 2^4."""
        fast = knots.with_momenta(5.0 * knots.momenta)
        reference = shoot(kernel, fast, particles, TimeGrid(steps=800), track_jacobian=False).terminal_particles

        def error(steps: int) -> float:
            y = shoot(kernel, fast, particles, TimeGrid(steps=steps), track_jacobian=False).terminal_particles
            return float(np.abs(y - reference).max())

        assert 8.0 <= error(50) / error(100) <= 32.0

    def test_logdet_gradient_path(self, kernel: GaussianKernel, knots: KnotSystem):
        x = np.array([[0.1], [0.6]])
        h = 1e-5
        trajectory = shoot(kernel, knots, x, logdet_gradient_step=h)
        plus = shoot(kernel, knots, x + 1e-4).terminal_logdet
        minus = shoot(kernel, knots, x - 1e-4).terminal_logdet

        assert trajectory.logdet_gradient_path.shape == (21, 2, 1)
        np.testing.assert_allclose(
            trajectory.logdet_gradient_path[-1, :, 0], (plus - minus) / 2e-4, rtol=1e-4, atol=1e-8
        )
        np.testing.assert_array_equal(trajectory.logdet_gradient_path[0], np.zeros((2, 1)))

    def test_logdet_gradient_step_must_be_positive(self, kernel: GaussianKernel, knots: KnotSystem):
        with pytest.raises(ValueError):
            shoot(kernel, knots, [[0.0]], logdet_gradient_step=0.0)

    def test_without_jacobian(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        trajectory = shoot(kernel, knots, particles, track_jacobian=False)

        assert trajectory.jacobian_path is None
        np.testing.assert_allclose(
            trajectory.terminal_particles, shoot(kernel, knots, particles).terminal_particles, atol=0.0
        )

    def test_second_half_continues_first(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        """phi_1 = phi_(1/2 -> 1) o phi_(1/2); halving the momenta stretches half the time onto [0, 1]."""
        full = shoot(kernel, knots, particles, TimeGrid(steps=20))
        middle = full.knots_at(10)
        second = shoot(kernel, middle.with_momenta(0.5 * middle.momenta), full.particle_path[10], TimeGrid(steps=10))

        np.testing.assert_allclose(second.terminal_particles, full.terminal_particles, atol=1e-10)
        np.testing.assert_allclose(second.terminal.knots, full.terminal.knots, atol=1e-10)
        np.testing.assert_allclose(full.logdet_path[10] + second.terminal_logdet, full.terminal_logdet, atol=1e-10)


# ============================================================================
# Sensitivities
# ============================================================================


class TestSensitivity:
    """Linearised flow against finite differences of shoot."""

    def test_momentum_direction(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        grid = TimeGrid(steps=20)
        direction = np.array([[0.3], [-0.2], [0.5]])
        sens = sensitivity(kernel, knots, particles, grid, KnotPerturbation(d_momenta=direction))
        h = 1e-6
        plus = shoot(kernel, knots.with_momenta(knots.momenta + h * direction), particles, grid, track_jacobian=False)
        minus = shoot(kernel, knots.with_momenta(knots.momenta - h * direction), particles, grid, track_jacobian=False)

        np.testing.assert_allclose(
            sens.particles, (plus.terminal_particles - minus.terminal_particles) / (2 * h), rtol=1e-5, atol=1e-9
        )
        np.testing.assert_allclose(
            sens.logdet, (plus.terminal_logdet - minus.terminal_logdet) / (2 * h), rtol=1e-5, atol=1e-8
        )

    def test_knot_direction(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        grid = TimeGrid(steps=20)
        d_kappa = np.array([[0.1], [0.2], [-0.1]])
        seed = KnotPerturbation(d_momenta=np.zeros_like(d_kappa), d_knots=d_kappa)
        sens = sensitivity(kernel, knots, particles, grid, seed)
        h = 1e-6
        plus = shoot(kernel, KnotSystem(knots.knots + h * d_kappa, knots.momenta), particles, grid)
        minus = shoot(kernel, KnotSystem(knots.knots - h * d_kappa, knots.momenta), particles, grid)

        np.testing.assert_allclose(
            sens.particles, (plus.terminal_particles - minus.terminal_particles) / (2 * h), rtol=1e-5, atol=1e-9
        )
        np.testing.assert_allclose(
            sens.knot_path[-1], (plus.terminal.knots - minus.terminal.knots) / (2 * h), rtol=1e-5, atol=1e-9
        )

    def test_batched_matches_single(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        grid = TimeGrid(steps=10)
        directions = np.eye(3).reshape(3, 3, 1)
        batched = sensitivity(kernel, knots, particles, grid, KnotPerturbation(d_momenta=directions))

        assert batched.particles.shape == (3, 7, 1)
        assert batched.logdet.shape == (3, 7)
        for p in range(3):
            single = sensitivity(kernel, knots, particles, grid, KnotPerturbation(d_momenta=directions[p]))
            np.testing.assert_allclose(batched.particles[p], single.particles, atol=1e-12)

    def test_linear_in_the_seed(self, kernel: GaussianKernel, knots: KnotSystem, particles: np.ndarray):
        grid = TimeGrid(steps=10)
        first = np.array([[0.3], [-0.2], [0.5]])
        second = np.array([[-0.1], [0.4], [0.2]])

        def run(direction: np.ndarray):
            return sensitivity(kernel, knots, particles, grid, KnotPerturbation(d_momenta=direction))

        scaled = run(2.5 * first)
        combined = run(first + second)
        np.testing.assert_allclose(scaled.particles, 2.5 * run(first).particles, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(scaled.logdet, 2.5 * run(first).logdet, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(
            combined.particles, run(first).particles + run(second).particles, rtol=1e-10, atol=1e-14
        )

    def test_shape_mismatch(self, kernel: GaussianKernel, knots: KnotSystem):
        with pytest.raises(DimensionMismatchError):
            sensitivity(kernel, knots, [[0.0]], None, KnotPerturbation(d_momenta=np.zeros((2, 1))))


# ============================================================================
# Inverse map
# ============================================================================


class TestInverseMap:
    """Tests for inverting the time-one map."""

    def test_round_trip(self, kernel: GaussianKernel, knots: KnotSystem):
        trajectory = shoot(kernel, knots, np.zeros((0, 1)))
        y = np.linspace(-0.3, 1.2, 11).reshape(-1, 1)
        result = inverse_map(kernel, trajectory, y)

        assert not result.extrapolated.any()
        forward = shoot(kernel, knots, result.points).terminal_particles
        np.testing.assert_allclose(forward, y, atol=1e-8)

    def test_single_knot_matches_bisection(self, kernel: GaussianKernel):
        knots = KnotSystem([[0.4]], [[0.3]])
        trajectory = shoot(kernel, knots, np.zeros((0, 1)))
        y = np.array([0.1, 0.45, 0.7, 1.3])

        def forward(x: float) -> float:
            return float(shoot(kernel, knots, [[x]], track_jacobian=False).terminal_particles[0, 0])

        expected = [optimize.bisect(lambda x, v=v: forward(x) - v, v - 1.0, v + 1.0, xtol=1e-13) for v in y]
        result = inverse_map(kernel, trajectory, y)

        assert not result.extrapolated.any()
        np.testing.assert_allclose(result.points[:, 0], expected, atol=1e-9)

    def test_identity_flow(self, kernel: GaussianKernel):
        trajectory = shoot(kernel, KnotSystem.at_rest([[0.0]]), np.zeros((0, 1)))
        y = np.array([[0.25], [0.75]])

        np.testing.assert_allclose(inverse_map(kernel, trajectory, y).points, y, atol=1e-12)

    def test_empty(self, kernel: GaussianKernel, knots: KnotSystem):
        trajectory = shoot(kernel, knots, np.zeros((0, 1)))
        result = inverse_map(kernel, trajectory, np.zeros((0, 1)))

        assert result.points.shape == (0, 1)
        assert result.extrapolated.shape == (0,)
