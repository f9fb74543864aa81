"""Unit tests for config documents and persisted records."""

import numpy as np
import pytest
from pydantic import ValidationError

from flowdense.kernel import GaussianKernel
from flowdense.models import (
    ExperimentConfig,
    FitConfig,
    FitRunConfig,
    KernelSpec,
    KnotSpec,
    ModelDocument,
    OptimizerConfig,
    SemiFitRunConfig,
    target_spec_of,
)
from flowdense.target import GaussianMixture2Target, GaussianTarget, UniformTaperedTarget

FIT_DOCUMENT = {
    "data": {"source": "inline", "values": [0.1, 0.4, 0.8]},
    "kernel": {"family": "gaussian", "sigma": 0.1},
    "target": {"family": "uniform_tapered", "a": 0.0, "b": 1.0},
    "fit": {"lambda": 10.0, "knots": {"strategy": "augmented_3n"}},
}


class TestKernelSpec:
    """Tests for kernel specs."""

    def test_fixed_bandwidth(self):
        """An explicit sigma should build a kernel with that bandwidth."""
        kernel = KernelSpec(sigma=0.3).build()

        assert isinstance(kernel, GaussianKernel)
        assert kernel.sigma == 0.3

    def test_data_relative_bandwidth(self):
        """sigma_data_sd_fraction should scale the data standard deviation."""
        data = np.array([[0.0], [2.0]])

        assert KernelSpec(sigma_data_sd_fraction=0.5).build(data).sigma == pytest.approx(0.5)

    def test_needs_exactly_one_bandwidth(self):
        """Giving both or neither bandwidth form should fail validation."""
        with pytest.raises(ValidationError):
            KernelSpec()
        with pytest.raises(ValidationError):
            KernelSpec(sigma=1.0, sigma_data_sd_fraction=0.5)

    def test_rejects_non_positive_sigma(self):
        with pytest.raises(ValidationError):
            KernelSpec(sigma=0.0)

    def test_relative_bandwidth_without_data(self):
        with pytest.raises(ValueError):
            KernelSpec(sigma_data_sd_fraction=0.5).build()


class TestFitConfig:
    """Tests for fit and optimiser settings."""

    def test_lambda_key(self):
        """The JSON key is lambda; lam is accepted in Python."""
        assert FitConfig.model_validate({"lambda": 2.0}).lam == 2.0
        assert FitConfig(lam=3.0).lam == 3.0

    def test_defaults(self):
        config = FitConfig(lam=1.0)

        assert config.steps == 20
        assert config.grid.steps == 20
        assert config.knots.strategy == "at_data"
        assert config.optimizer.armijo_c == 1e-4
        assert config.optimizer.backtrack_factor == 0.5
        assert config.optimizer.max_backtracks == 50
        assert config.optimizer.metric == "rkhs"
        assert config.optimizer.method == "lbfgs"
        assert config.optimizer.memory == 20

    @pytest.mark.parametrize("lam", [0.0, -1.0])
    def test_rejects_non_positive_lambda(self, lam):
        with pytest.raises(ValidationError):
            FitConfig(lam=lam)

    def test_rejects_unknown_keys(self):
        """Unknown keys are a configuration error, not silently ignored."""
        with pytest.raises(ValidationError):
            FitConfig.model_validate({"lambda": 1.0, "learning_rate": 0.1})

    def test_rejects_backtrack_factor_of_one(self):
        with pytest.raises(ValidationError):
            OptimizerConfig(backtrack_factor=1.0)


class TestKnotSpec:
    """Tests for knot placement specs."""

    def test_subsample_needs_count(self):
        with pytest.raises(ValidationError):
            KnotSpec(strategy="subsample")

    def test_explicit_needs_points(self):
        with pytest.raises(ValidationError):
            KnotSpec(strategy="explicit")

    def test_rejects_non_positive_delta(self):
        with pytest.raises(ValidationError):
            KnotSpec(strategy="augmented_3n", delta=0.0)


class TestRunConfigs:
    """Tests for the documents read by the CLI."""

    def test_fit_document(self):
        config = FitRunConfig.model_validate(FIT_DOCUMENT)

        assert config.fit.lam == 10.0
        assert config.target.build().family == "uniform_tapered"
        assert config.data.source == "inline"

    def test_unknown_target_family(self):
        document = {**FIT_DOCUMENT, "target": {"family": "cauchy"}}

        with pytest.raises(ValidationError):
            FitRunConfig.model_validate(document)

    def test_unknown_data_source(self):
        document = {**FIT_DOCUMENT, "data": {"source": "s3", "bucket": "b"}}

        with pytest.raises(ValidationError):
            FitRunConfig.model_validate(document)

    def test_semifit_document(self):
        document = {key: value for key, value in FIT_DOCUMENT.items() if key != "target"}
        config = SemiFitRunConfig.model_validate({**document, "family": "gaussian_mixture2", "outer": {"max_outer": 3}})

        assert config.outer.max_outer == 3
        assert config.outer.theta_tol == 1e-5

    def test_semifit_rejects_uniform_family(self):
        document = {key: value for key, value in FIT_DOCUMENT.items() if key != "target"}

        with pytest.raises(ValidationError):
            SemiFitRunConfig.model_validate({**document, "family": "uniform_tapered"})

    def test_flow_experiment_needs_target(self):
        document = {key: value for key, value in FIT_DOCUMENT.items() if key != "target"}

        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate({**document, "figure": "fig2", "variants": [{"name": "at_data"}]})

    def test_diagnostic_times_in_unit_interval(self):
        document = {
            **FIT_DOCUMENT,
            "figure": "fig2",
            "variants": [{"name": "at_data"}],
            "diagnostics": {"times": [0.0, 1.5]},
        }

        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate(document)


class TestModelDocument:
    """Tests for the persisted model record."""

    def test_target_spec_of_each_family(self):
        for target in (
            UniformTaperedTarget(a=0.0, b=2.0),
            GaussianTarget(mu=1.0, sigma=0.5),
            GaussianMixture2Target(alpha=0.2, mu1=0.0, sigma1=1.0, mu2=3.0, sigma2=0.5),
        ):
            rebuilt = target_spec_of(target).build()
            np.testing.assert_array_equal(rebuilt.params(), target.params())

    def test_knot_count_mismatch(self):
        with pytest.raises(ValidationError):
            ModelDocument.model_validate(
                {
                    "kernel": {"sigma": 0.1},
                    "knots": [[0.0], [1.0]],
                    "momenta": [[0.0]],
                    "target": {"family": "gaussian"},
                    "steps": 20,
                    "lambda": 1.0,
                }
            )

    def test_knot_system(self):
        document = ModelDocument.model_validate(
            {
                "kernel": {"sigma": 0.1},
                "knots": [[0.0], [1.0]],
                "momenta": [[0.5], [-0.5]],
                "target": {"family": "gaussian"},
                "steps": 20,
                "lambda": 1.0,
            }
        )

        system = document.knot_system()
        assert system.size == 2
        np.testing.assert_array_equal(system.momenta, [[0.5], [-0.5]])
