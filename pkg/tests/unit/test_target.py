"""Unit tests for target densities, maximum likelihood and EM."""

import numpy as np
import pytest
from scipy import integrate

from flowdense.exceptions import DegenerateFitError, DimensionMismatchError, UnsupportedDimensionError
from flowdense.target import (
    GaussianMixture2Target,
    GaussianTarget,
    UniformTaperedTarget,
    fit_mixture_em,
    log_likelihood,
    mle_fit,
    target_from_params,
)


def _finite_difference(target, points: np.ndarray, h: float = 1e-6) -> np.ndarray:
    return (target.log_density(points + h) - target.log_density(points - h)) / (2 * h)


@pytest.fixture
def uniform() -> UniformTaperedTarget:
    return UniformTaperedTarget(a=0.0, b=1.0)


@pytest.fixture
def mixture() -> GaussianMixture2Target:
    return GaussianMixture2Target(alpha=0.3, mu1=-1.0, sigma1=0.5, mu2=2.0, sigma2=1.2)


# ============================================================================
# Uniform with taper
# ============================================================================


class TestUniformTapered:
    """Tests for the tapered uniform target."""

    def test_default_taper_width(self, uniform: UniformTaperedTarget):
        assert uniform.w == pytest.approx(0.05)

    def test_flat_inside_interval(self, uniform: UniformTaperedTarget):
        values = uniform.log_density(np.linspace(0.0, 1.0, 11).reshape(-1, 1))

        np.testing.assert_allclose(values, values[0], atol=0.0)
        np.testing.assert_array_equal(uniform.grad_log_density([[0.2], [0.7]]), np.zeros((2, 1)))

    def test_normalised(self, uniform: UniformTaperedTarget):
        mass, _ = integrate.quad(
            lambda u: np.exp(uniform.log_density(u)), -1.0, 2.0, points=[-0.05, 0.0, 1.0, 1.05], limit=200
        )

        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_drops_by_depth_across_taper(self, uniform: UniformTaperedTarget):
        inside = uniform.log_density(0.5)
        edge = uniform.log_density(1.05)

        assert inside - edge == pytest.approx(30.0, abs=1e-9)

    def test_score_matches_finite_differences(self, uniform: UniformTaperedTarget):
        points = np.array([[-0.12], [-0.03], [0.5], [1.01], [1.04], [1.2]])

        np.testing.assert_allclose(
            uniform.grad_log_density(points)[:, 0], _finite_difference(uniform, points), rtol=1e-5, atol=1e-6
        )

    def test_score_is_continuous_at_taper_end(self, uniform: UniformTaperedTarget):
        below = uniform.grad_log_density(1.05 - 1e-12)
        above = uniform.grad_log_density(1.05 + 1e-12)

        assert below[0] == pytest.approx(above[0], abs=1e-6)

    def test_two_dimensional_is_product(self):
        target = UniformTaperedTarget(a=0.0, b=1.0, dim=2)
        line = UniformTaperedTarget(a=0.0, b=1.0)
        point = np.array([0.3, 1.02])

        assert target.log_density(point) == pytest.approx(line.log_density(0.3) + line.log_density(1.02))

    def test_cdf(self, uniform: UniformTaperedTarget):
        cdf = uniform.cdf(np.array([-1.0, 0.5, 2.0]))

        assert cdf[0] == 0.0
        assert cdf[1] == pytest.approx(0.5, abs=1e-6)
        assert cdf[2] == 1.0

    def test_sample_reproducible_and_mostly_inside(self, uniform: UniformTaperedTarget):
        first = uniform.sample(2000, 11)
        second = uniform.sample(2000, 11)

        np.testing.assert_array_equal(first, second)
        assert first.shape == (2000, 1)
        assert np.mean((first >= 0.0) & (first <= 1.0)) > 0.95

    def test_rejects_empty_interval(self):
        with pytest.raises(ValueError):
            UniformTaperedTarget(a=1.0, b=1.0)

    def test_support(self, uniform: UniformTaperedTarget):
        assert uniform.support() == pytest.approx((-0.1, 1.1))


# ============================================================================
# Gaussian
# ============================================================================


class TestGaussian:
    """Tests for the normal target."""

    def test_standard_normal_at_zero(self):
        assert GaussianTarget().log_density(0.0) == pytest.approx(-0.918939, abs=1e-6)

    def test_score(self):
        target = GaussianTarget(mu=1.0, sigma=2.0)

        np.testing.assert_allclose(target.grad_log_density(3.0), [-0.5])

    def test_many_points_return_vector(self):
        values = GaussianTarget().log_density([0.0, 1.0, 2.0])

        assert values.shape == (3,)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            GaussianTarget(dim=2).log_density(np.zeros((4, 3)))

    def test_cdf_only_on_the_line(self):
        with pytest.raises(UnsupportedDimensionError):
            GaussianTarget(dim=2).cdf(np.zeros(2))

    def test_to_spec(self):
        assert GaussianTarget(mu=0.5, sigma=2.0).to_spec() == {"family": "gaussian", "dim": 1, "mu": 0.5, "sigma": 2.0}

    def test_rejects_non_positive_scale(self):
        with pytest.raises(ValueError):
            GaussianTarget(sigma=0.0)

    def test_sample_moments(self):
        draws = GaussianTarget(mu=1.0, sigma=2.0).sample(100000, 9)[:, 0]

        assert draws.mean() == pytest.approx(1.0, abs=0.02)
        assert draws.std() == pytest.approx(2.0, abs=0.02)


# ============================================================================
# Two-component mixture
# ============================================================================


class TestMixture:
    """Tests for the two-component normal mixture."""

    def test_degenerate_weight_matches_gaussian(self):
        mixture = GaussianMixture2Target(alpha=1.0, mu1=0.3, sigma1=0.7, mu2=5.0, sigma2=1.0)
        gaussian = GaussianTarget(mu=0.3, sigma=0.7)
        points = np.linspace(-2, 2, 9)

        np.testing.assert_allclose(mixture.log_density(points), gaussian.log_density(points), atol=1e-12)

    def test_score_matches_finite_differences(self, mixture: GaussianMixture2Target):
        points = np.linspace(-3, 5, 17).reshape(-1, 1)

        np.testing.assert_allclose(
            mixture.grad_log_density(points)[:, 0], _finite_difference(mixture, points), rtol=1e-6, atol=1e-8
        )

    def test_normalised(self, mixture: GaussianMixture2Target):
        mass, _ = integrate.quad(lambda u: np.exp(mixture.log_density(u)), -np.inf, np.inf)

        assert mass == pytest.approx(1.0, abs=1e-8)

    def test_only_on_the_line(self):
        with pytest.raises(UnsupportedDimensionError):
            GaussianMixture2Target(dim=2)

    def test_rejects_weight_outside_unit_interval(self):
        with pytest.raises(ValueError):
            GaussianMixture2Target(alpha=1.5)

    def test_sample_weight(self, mixture: GaussianMixture2Target):
        draws = mixture.sample(20000, 3)[:, 0]

        assert np.mean(draws < 0.5) == pytest.approx(float(mixture.cdf(0.5)), abs=0.02)

    def test_sample_fraction_below_zero(self, mixture: GaussianMixture2Target):
        """0.3 P(N(-1, 0.5^2) < 0) + 0.7 P(N(2, 1.2^2) < 0) = 0.3266."""
        draws = mixture.sample(100000, 4)[:, 0]

        assert np.mean(draws < 0.0) == pytest.approx(0.3266, abs=0.01)
        assert float(mixture.cdf(0.0)) == pytest.approx(0.3266, abs=1e-3)


class TestTargetFromParams:
    """Tests for rebuilding targets from parameter vectors."""

    @pytest.mark.parametrize(
        "target",
        [
            GaussianTarget(mu=0.2, sigma=1.5),
            GaussianMixture2Target(alpha=0.4, mu1=-1.0, sigma1=0.5, mu2=1.0, sigma2=0.8),
            UniformTaperedTarget(a=-1.0, b=2.0, w=0.1),
        ],
    )
    def test_params_rebuild_same_density(self, target):
        rebuilt = target_from_params(target.family, target.params(), target.dim)
        points = np.linspace(-2, 3, 11)

        np.testing.assert_allclose(rebuilt.log_density(points), target.log_density(points))

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            target_from_params("student_t", [1.0])


# ============================================================================
# Maximum likelihood
# ============================================================================


class TestMaximumLikelihood:
    """Tests for MLE and EM."""

    def test_gaussian_on_two_points(self):
        fit = mle_fit("gaussian", [-1.0, 1.0])

        assert fit.mu[0] == pytest.approx(0.0)
        assert fit.sigma == pytest.approx(1.0)

    def test_gaussian_on_constant_data(self):
        with pytest.raises(DegenerateFitError):
            mle_fit("gaussian", [2.0, 2.0, 2.0])

    def test_em_recovers_separated_components(self):
        rng = np.random.default_rng(8)
        data = np.concatenate([rng.normal(-2.0, 0.5, 300), rng.normal(3.0, 1.0, 700)])
        fit = fit_mixture_em(data)
        alpha, mu1, s1, mu2, s2 = fit.best.params()
        if mu1 > mu2:
            alpha, mu1, s1, mu2, s2 = 1 - alpha, mu2, s2, mu1, s1

        assert alpha == pytest.approx(0.3, abs=0.05)
        assert mu1 == pytest.approx(-2.0, abs=0.15)
        assert mu2 == pytest.approx(3.0, abs=0.15)
        assert s1 == pytest.approx(0.5, abs=0.1)
        assert s2 == pytest.approx(1.0, abs=0.1)

    def test_em_best_run_has_highest_likelihood(self):
        rng = np.random.default_rng(9)
        data = np.concatenate([rng.normal(0.0, 1.0, 100), rng.normal(4.0, 1.0, 100)])
        fit = fit_mixture_em(data)
        survivors = [run for run in fit.runs if not run.degenerate]

        assert len(fit.runs) == 10
        assert log_likelihood(fit.best, data) == pytest.approx(max(run.final_loglik for run in survivors))
        for run in survivors:
            assert run.final_loglik >= run.initial_loglik - 1e-8

    def test_em_on_constant_data(self):
        with pytest.raises(DegenerateFitError):
            fit_mixture_em(np.full(20, 1.5))

    def test_unfittable_family(self):
        with pytest.raises(ValueError):
            mle_fit("uniform_tapered", [0.1, 0.2])
