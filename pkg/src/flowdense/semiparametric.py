"""Alternating fit of a parametric target family and a nonparametric flow.

Each outer pass fits the flow against P_theta (warm-started from the previous
knot state), then refits theta by maximum likelihood on the transformed
sample phi_1(X_k). Both steps ascend the same objective, so the objective
trace is nondecreasing.
"""

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from flowdense.estimator import DensityEstimate, energy, fit_pmle, knot_summary, log_density_estimate, make_knots
from flowdense.exceptions import DegenerateFitError, OptimizerStalledError
from flowdense.flow import KnotSystem
from flowdense.kernel import RadialKernel
from flowdense.models import FitConfig, OuterConfig, OuterIterate
from flowdense.target import FITTABLE_FAMILIES, TargetDensity, log_likelihood, mle_fit, target_from_params

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SemiFitReport:
    family: str
    iterates: list[OuterIterate]
    converged: bool
    estimate: DensityEstimate
    message: str | None = None
    stalled: bool = False

    @property
    def theta(self) -> np.ndarray:
        return self.estimate.target.params()

    @property
    def objective_trace(self) -> list[float]:
        """Objective after each flow step and each theta step, in order."""
        trace: list[float] = []
        for it in self.iterates:
            trace.extend([it.objective_after_flow, it.objective])
        return trace


@dataclass(frozen=True)
class HeldoutResult:
    """Mean held-out log-likelihood per observation."""

    semiparametric: float
    parametric: float
    folds: int
    fold_semiparametric: list[float]
    fold_parametric: list[float]


def joint_objective(
    family: str,
    theta,
    knots: KnotSystem,
    data,
    kernel: RadialKernel,
    config: FitConfig,
) -> float:
    """Penalised log-likelihood with H the log-density of P_theta."""
    target = target_from_params(family, theta, kernel.dim)
    return energy(kernel, knots, data, target, config)


def fit_semiparametric(
    data,
    family: str,
    kernel: RadialKernel,
    config: FitConfig,
    outer: OuterConfig | None = None,
) -> SemiFitReport:
    """Run the alternating flow / parameter fit until both stabilise.

    Args:
        data: (n, d) observations.
        family: Parametric target family, gaussian or gaussian_mixture2.
        kernel: Kernel generating the flow's vector fields.
        config: Fit configuration for each flow step.
        outer: Outer-loop stopping rules.

    Returns:
        SemiFitReport; converged is false when max_outer was reached, a flow
        step stalled, or a theta step degenerated. The estimate is the best
        state reached in every case.

    Raises:
        DegenerateFitError: If the initial parametric fit on the raw data fails.
    """
    if family not in FITTABLE_FAMILIES:
        raise ValueError(f"family must be one of {FITTABLE_FAMILIES}, got {family!r}")
    outer = outer or OuterConfig()
    x = kernel.as_points(data)
    scale = float(np.max(np.std(x, axis=0))) if x.shape[0] > 1 else 1.0
    phi_tol = outer.phi_tol if outer.phi_tol is not None else 1e-5 * (scale if scale > 0 else 1.0)

    target: TargetDensity = mle_fit(family, x)
    knots = make_knots(config.knots, x, kernel, config)
    previous_map = x.copy()
    iterates: list[OuterIterate] = []
    estimate: DensityEstimate | None = None
    converged = False
    stalled = False
    message = None

    for iteration in range(1, outer.max_outer + 1):
        try:
            estimate = fit_pmle(x, target, kernel, config, initial=knots)
        except OptimizerStalledError as err:
            estimate = err.best_estimate
            stalled = True
            message = f"flow step stalled in outer iteration {iteration}: {err}"
            logger.warning(message)
            break
        knots = estimate.knots
        mapped = estimate.trajectory.terminal_particles
        objective_after_flow = estimate.report.final_energy

        try:
            candidate = mle_fit(family, mapped)
        except DegenerateFitError as err:
            message = f"parameter step degenerated in outer iteration {iteration}: {err}"
            logger.warning(message)
            break
        # keep the old theta when it explains phi_1(X) better
        if log_likelihood(candidate, mapped) < log_likelihood(target, mapped):
            candidate = target

        theta_change = float(np.max(np.abs(candidate.params() - target.params())))
        map_change = float(np.max(np.abs(mapped - previous_map)))
        objective = joint_objective(family, candidate.params(), knots, x, kernel, config)
        iterates.append(
            OuterIterate(
                iteration=iteration,
                theta=[float(v) for v in candidate.params()],
                objective_after_flow=objective_after_flow,
                objective=objective,
                loglik_theta=log_likelihood(candidate, mapped),
                **knot_summary(knots),
                theta_change=theta_change,
                map_change=map_change,
            )
        )
        logger.info(
            "outer %d: objective %.10g -> %.10g, |dtheta|=%.3e, |dphi|=%.3e",
            iteration,
            objective_after_flow,
            objective,
            theta_change,
            map_change,
        )
        target = candidate
        previous_map = mapped
        if theta_change <= outer.theta_tol and map_change <= phi_tol:
            converged = True
            break
    else:
        message = f"no convergence within {outer.max_outer} outer iterations"
        logger.warning(message)

    if estimate is None:
        raise OptimizerStalledError(message or "semiparametric fit produced no estimate")
    final_report = estimate.report
    if iterates and final_report is not None and estimate.target is not target:
        final_report = final_report.model_copy(update={"final_energy": iterates[-1].objective})
    estimate = dataclasses.replace(estimate, target=target, report=final_report)
    return SemiFitReport(
        family=family,
        iterates=iterates,
        converged=converged,
        estimate=estimate,
        message=message,
        stalled=stalled,
    )


def heldout_comparison(
    data,
    family: str,
    kernel: RadialKernel,
    config: FitConfig,
    outer: OuterConfig | None = None,
    folds: int = 5,
    seed: int = 0,
) -> HeldoutResult:
    """k-fold held-out log-likelihood of the semiparametric fit and of the plain parametric fit."""
    x = kernel.as_points(data)
    if folds < 2 or folds > x.shape[0]:
        raise ValueError(f"folds must lie in [2, {x.shape[0]}], got {folds}")
    order = np.random.default_rng(seed).permutation(x.shape[0])
    semi_scores, param_scores = [], []
    for fold, test_idx in enumerate(np.array_split(order, folds)):
        train = np.delete(x, test_idx, axis=0)
        test = x[test_idx]
        semi = fit_semiparametric(train, family, kernel, config, outer)
        semi_scores.append(float(np.mean(log_density_estimate(semi.estimate, test))))
        param_scores.append(float(np.mean(mle_fit(family, train).log_density(test))))
        logger.info(
            "fold %d: held-out loglik semiparametric %.6g, parametric %.6g", fold, semi_scores[-1], param_scores[-1]
        )
    return HeldoutResult(
        semiparametric=float(np.mean(semi_scores)),
        parametric=float(np.mean(param_scores)),
        folds=folds,
        fold_semiparametric=semi_scores,
        fold_parametric=param_scores,
    )
