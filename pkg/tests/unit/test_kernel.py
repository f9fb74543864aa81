"""Unit tests for radial kernels and RKHS inner products."""

import numpy as np
import pytest

from flowdense.exceptions import DimensionMismatchError, UnknownSectionKindError
from flowdense.flow import KnotSystem
from flowdense.kernel import GaussianKernel, Section, make_kernel


@pytest.fixture
def kernel() -> GaussianKernel:
    return GaussianKernel(sigma=0.1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


class TestConstruction:
    """Tests for kernel construction and validation."""

    def test_rejects_non_positive_bandwidth(self):
        with pytest.raises(ValueError):
            GaussianKernel(sigma=0.0)

    def test_rejects_zero_dimension(self):
        with pytest.raises(ValueError):
            GaussianKernel(sigma=1.0, dim=0)

    def test_make_kernel_by_family(self):
        kernel = make_kernel("gaussian", 0.5, dim=2)

        assert isinstance(kernel, GaussianKernel)
        assert kernel.sigma == 0.5
        assert kernel.dim == 2

    def test_make_kernel_unknown_family(self):
        with pytest.raises(ValueError, match="unknown kernel family"):
            make_kernel("matern", 1.0)


class TestEval:
    """Tests for pointwise evaluation."""

    def test_unit_at_zero_distance(self, kernel: GaussianKernel):
        assert kernel.eval(0.0, 0.0) == 1.0

    def test_closed_form_at_one_bandwidth(self, kernel: GaussianKernel):
        assert kernel.eval(0.0, 0.1) == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_symmetric(self, rng: np.random.Generator):
        kernel = GaussianKernel(sigma=0.7, dim=2)
        for x, y in zip(rng.normal(size=(100, 2)), rng.normal(size=(100, 2)), strict=True):
            assert kernel.eval(x, y) == kernel.eval(y, x)

    def test_dimension_mismatch(self):
        kernel = GaussianKernel(sigma=1.0, dim=2)

        with pytest.raises(DimensionMismatchError):
            kernel.eval([0.0, 0.0, 0.0], [0.0, 0.0])


class TestDerivatives:
    """Closed-form derivatives against finite differences."""

    def test_grad_y_vanishes_at_coincidence(self, kernel: GaussianKernel):
        np.testing.assert_array_equal(kernel.grad_y(0.3, 0.3), [0.0])

    def test_grad_y_closed_form(self):
        kernel = GaussianKernel(sigma=1.0)

        assert kernel.grad_y(0.0, 1.0)[0] == pytest.approx(-np.exp(-0.5), abs=1e-12)

    def test_grad_y_antisymmetric(self, rng: np.random.Generator):
        kernel = GaussianKernel(sigma=0.8, dim=2)
        x, y = rng.normal(size=2), rng.normal(size=2)

        np.testing.assert_allclose(kernel.grad_y(x, y), -kernel.grad_y(y, x), atol=1e-15)

    def test_grad_y_matches_finite_differences(self, rng: np.random.Generator):
        kernel = GaussianKernel(sigma=0.9, dim=2)
        h = 1e-6
        for _ in range(50):
            x, y = rng.normal(size=2), rng.normal(size=2)
            fd = [(kernel.eval(x, y + h * e) - kernel.eval(x, y - h * e)) / (2 * h) for e in np.eye(2)]
            np.testing.assert_allclose(kernel.grad_y(x, y), fd, atol=1e-7)

    def test_cross_hessian_at_coincidence(self):
        kernel = GaussianKernel(sigma=1.0)

        assert kernel.cross_hessian(0.0, 0.0)[0, 0] == pytest.approx(1.0)

    def test_cross_hessian_matches_nested_differences(self, rng: np.random.Generator):
        kernel = GaussianKernel(sigma=1.1, dim=2)
        h = 1e-4
        eye = np.eye(2)
        for _ in range(50):
            x, y = rng.normal(size=2), rng.normal(size=2)
            fd = np.empty((2, 2))
            for i in range(2):
                for j in range(2):
                    fd[i, j] = (
                        kernel.eval(x + h * eye[i], y + h * eye[j])
                        - kernel.eval(x + h * eye[i], y - h * eye[j])
                        - kernel.eval(x - h * eye[i], y + h * eye[j])
                        + kernel.eval(x - h * eye[i], y - h * eye[j])
                    ) / (4 * h * h)
            np.testing.assert_allclose(kernel.cross_hessian(x, y), fd, atol=1e-5)

    def test_cross_hessian_argument_swap(self, rng: np.random.Generator):
        kernel = GaussianKernel(sigma=0.6, dim=3)
        x, y = rng.normal(size=3), rng.normal(size=3)

        np.testing.assert_allclose(kernel.cross_hessian(x, y), kernel.cross_hessian(y, x).T, atol=1e-15)


class TestGram:
    """Tests for Gram matrices and RKHS norms."""

    def test_single_point(self, kernel: GaussianKernel):
        np.testing.assert_array_equal(kernel.gram([[0.4]]), [[1.0]])

    def test_empty(self, kernel: GaussianKernel):
        assert kernel.gram(np.zeros((0, 1))).shape == (0, 0)

    def test_coincident_points_singular(self, kernel: GaussianKernel):
        g = kernel.gram([[0.2], [0.2]])

        assert np.linalg.det(g) == pytest.approx(0.0, abs=1e-14)

    def test_distinct_points_positive_definite(self, rng: np.random.Generator):
        kernel = GaussianKernel(sigma=0.5, dim=2)
        g = kernel.gram(rng.normal(size=(5, 2)))

        assert np.linalg.eigvalsh(g).min() > 0
        np.testing.assert_array_equal(g, g.T)

    def test_norm_of_zero_momenta(self, kernel: GaussianKernel):
        assert kernel.rkhs_norm_sq(KnotSystem.at_rest([[0.1], [0.5]])) == 0.0

    def test_norm_single_knot(self, kernel: GaussianKernel):
        assert kernel.rkhs_norm_sq(KnotSystem([[0.3]], [[2.0]])) == pytest.approx(4.0)

    def test_norm_far_apart_knots(self, kernel: GaussianKernel):
        knots = KnotSystem([[0.0], [5.0]], [[1.0], [1.0]])

        assert kernel.rkhs_norm_sq(knots) == pytest.approx(2.0, abs=1e-9)

    def test_norm_permutation_invariant(self, rng: np.random.Generator):
        kernel = GaussianKernel(sigma=0.5, dim=2)
        kappa, eta = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        perm = rng.permutation(4)

        assert kernel.rkhs_norm_sq(KnotSystem(kappa, eta)) == pytest.approx(
            kernel.rkhs_norm_sq(KnotSystem(kappa[perm], eta[perm])), rel=1e-12
        )


class TestSectionInnerProducts:
    """Tests for inner products of value and gradient sections."""

    def test_single_value_section(self, kernel: GaussianKernel):
        np.testing.assert_allclose(kernel.section_inner_products([Section(np.array([0.2]))]), [[1.0]])

    def test_value_gradient_pair_orthogonal_at_same_point(self, kernel: GaussianKernel):
        sections = [Section(np.array([0.2])), Section(np.array([0.2]), "gradient", 0)]
        gram = kernel.section_inner_products(sections)

        assert gram[0, 1] == pytest.approx(0.0, abs=1e-15)
        assert gram[1, 0] == pytest.approx(0.0, abs=1e-15)

    def test_mixed_sections_psd(self, rng: np.random.Generator):
        kernel = GaussianKernel(sigma=0.7, dim=2)
        pts = rng.normal(size=(2, 2))
        sections = [
            Section(pts[0]),
            Section(pts[1]),
            Section(pts[0], "gradient", 1),
            Section(pts[1], "gradient", 0),
        ]
        gram = kernel.section_inner_products(sections)

        np.testing.assert_allclose(gram, gram.T, atol=1e-15)
        assert np.linalg.eigvalsh(gram).min() >= -1e-10

    def test_value_gradient_entry_is_grad_y(self, rng: np.random.Generator):
        kernel = GaussianKernel(sigma=0.7, dim=2)
        a, b = rng.normal(size=2), rng.normal(size=2)
        gram = kernel.section_inner_products([Section(a), Section(b, "gradient", 1)])

        assert gram[0, 1] == pytest.approx(kernel.grad_y(a, b)[1], rel=1e-12)

    def test_unknown_kind(self, kernel: GaussianKernel):
        with pytest.raises(UnknownSectionKindError):
            kernel.section_inner_products([Section(np.array([0.0]), "hessian")])  # type: ignore[arg-type]

    def test_gradient_without_component(self, kernel: GaussianKernel):
        with pytest.raises(DimensionMismatchError):
            kernel.section_inner_products([Section(np.array([0.0]), "gradient")])
