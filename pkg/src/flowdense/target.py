"""Target densities exp(H) and the parametric families used by the semiparametric fit."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np
from scipy import integrate, stats
from scipy.special import logsumexp

from flowdense.exceptions import DegenerateFitError, DimensionMismatchError, UnsupportedDimensionError

logger = logging.getLogger(__name__)

TAPER_DEPTH = 30.0
EM_RESTARTS = 10
EM_MAX_ITER = 500
EM_TOL = 1e-9


def _points(x, dim: int) -> tuple[np.ndarray, bool]:
    """Return (m, d) points and whether x was a single point."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 0 or (arr.ndim == 1 and (arr.shape[0] == dim and (dim > 1 or arr.shape[0] == 1)))
    if single:
        arr = arr.reshape(1, -1)
    elif arr.ndim == 1 and dim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionMismatchError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return arr, single


class TargetDensity(ABC):
    """A probability density exp(H) on R^d with score, sampler and parameters."""

    family: ClassVar[str]
    dim: int

    @abstractmethod
    def _log_density(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _grad_log_density(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def sample(self, n: int, rng_seed: int | np.random.Generator | None = None) -> np.ndarray:
        """n iid draws as an (n, d) array, deterministic given the seed."""

    @abstractmethod
    def params(self) -> np.ndarray:
        """Parameter vector theta in the family's canonical order."""

    @abstractmethod
    def support(self) -> tuple[float, float]:
        """Interval (per coordinate) holding all but a negligible part of the mass."""

    @abstractmethod
    def _cdf(self, x: np.ndarray) -> np.ndarray: ...

    def log_density(self, x) -> np.ndarray | float:
        """H(x) for one point (scalar) or many ((m,) array)."""
        pts, single = _points(x, self.dim)
        out = self._log_density(pts)
        return float(out[0]) if single else out

    def grad_log_density(self, x) -> np.ndarray:
        """grad H(x); shape (d,) for one point, (m, d) for many."""
        pts, single = _points(x, self.dim)
        out = self._grad_log_density(pts)
        return out[0] if single else out

    def cdf(self, x) -> np.ndarray:
        """Distribution function (d=1 only)."""
        if self.dim != 1:
            raise UnsupportedDimensionError(self.dim, "cdf")
        return self._cdf(np.asarray(x, dtype=float))

    def to_spec(self) -> dict[str, Any]:
        """Plain-dict description used by model documents."""
        spec: dict[str, Any] = {"family": self.family, "dim": self.dim}
        spec.update(zip(FAMILY_PARAMS[self.family], (float(v) for v in self.params()), strict=True))
        return spec


def _rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _smoothstep(z: np.ndarray) -> np.ndarray:
    return z * z * (3.0 - 2.0 * z)


def _smoothstep_slope(z: np.ndarray) -> np.ndarray:
    return 6.0 * z * (1.0 - z)


@dataclass(frozen=True, eq=False)
class UniformTaperedTarget(TargetDensity):
    """Uniform density on [a, b]^d with a C^1 taper of width w.

    Each coordinate's log-density drops by TAPER_DEPTH through a cubic
    smoothstep on [a - w, a] and [b, b + w], then continues with a quadratic
    tail so that the density is integrable on the whole line.
    """

    family: ClassVar[str] = "uniform_tapered"

    a: float = 0.0
    b: float = 1.0
    w: float | None = None
    dim: int = 1
    depth: float = TAPER_DEPTH
    _log_norm: float = field(init=False, repr=False, default=0.0)
    _table: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False, compare=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if not self.a < self.b:
            raise ValueError(f"need a < b, got a={self.a}, b={self.b}")
        w = 0.05 * (self.b - self.a) if self.w is None else float(self.w)
        if w <= 0:
            raise ValueError(f"taper width must be positive, got {w}")
        object.__setattr__(self, "w", w)
        taper, _ = integrate.quad(lambda z: np.exp(-self.depth * _smoothstep(z)), 0.0, 1.0, epsabs=1e-13, epsrel=1e-12)
        tail = np.exp(-self.depth) * 0.5 * np.sqrt(np.pi / self.depth)
        z1 = (self.b - self.a) + 2.0 * w * (taper + tail)
        object.__setattr__(self, "_log_norm", float(np.log(z1)))

        nodes = np.linspace(self.a - 4.0 * w, self.b + 4.0 * w, 40001)
        dens = np.exp(self._coordinate_log(nodes) - self._log_norm)
        cum = integrate.cumulative_trapezoid(dens, nodes, initial=0.0)
        object.__setattr__(self, "_table", (nodes, cum / cum[-1]))

    def _coordinate_log(self, u: np.ndarray) -> np.ndarray:
        a, b, w, depth = self.a, self.b, self.w, self.depth
        out = np.zeros_like(u, dtype=float)
        left = u < a
        right = u > b
        zl = np.clip((a - u) / w, 0.0, 1.0)
        zr = np.clip((u - b) / w, 0.0, 1.0)
        out = np.where(left, -depth * _smoothstep(zl), out)
        out = np.where(right, -depth * _smoothstep(zr), out)
        el = np.maximum(a - w - u, 0.0) / w
        er = np.maximum(u - b - w, 0.0) / w
        return out - depth * (el * el + er * er)

    def _coordinate_slope(self, u: np.ndarray) -> np.ndarray:
        a, b, w, depth = self.a, self.b, self.w, self.depth
        zl = np.clip((a - u) / w, 0.0, 1.0)
        zr = np.clip((u - b) / w, 0.0, 1.0)
        slope = np.where(u < a, depth / w * _smoothstep_slope(zl), 0.0)
        slope = np.where(u > b, -depth / w * _smoothstep_slope(zr), slope)
        el = np.maximum(a - w - u, 0.0)
        er = np.maximum(u - b - w, 0.0)
        return slope + 2.0 * depth * (el - er) / (w * w)

    def _log_density(self, x: np.ndarray) -> np.ndarray:
        return self._coordinate_log(x).sum(axis=1) - self.dim * self._log_norm

    def _grad_log_density(self, x: np.ndarray) -> np.ndarray:
        return self._coordinate_slope(x)

    def sample(self, n: int, rng_seed: int | np.random.Generator | None = None) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        nodes, cum = self._table
        u = _rng(rng_seed).random((n, self.dim))
        return np.interp(u, cum, nodes)

    def _cdf(self, x: np.ndarray) -> np.ndarray:
        nodes, cum = self._table
        return np.interp(x, nodes, cum, left=0.0, right=1.0)

    def params(self) -> np.ndarray:
        return np.array([self.a, self.b, self.w])

    def support(self) -> tuple[float, float]:
        return self.a - 2.0 * self.w, self.b + 2.0 * self.w


@dataclass(frozen=True, eq=False)
class GaussianTarget(TargetDensity):
    """Isotropic normal N(mu, sigma^2 I)."""

    family: ClassVar[str] = "gaussian"

    mu: float | np.ndarray = 0.0
    sigma: float = 1.0
    dim: int = 1

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (self.dim,)).copy()
        object.__setattr__(self, "mu", mu)

    def _log_density(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mu) / self.sigma
        return -0.5 * np.sum(z * z, axis=1) - self.dim * (0.5 * np.log(2.0 * np.pi) + np.log(self.sigma))

    def _grad_log_density(self, x: np.ndarray) -> np.ndarray:
        return -(x - self.mu) / self.sigma**2

    def sample(self, n: int, rng_seed: int | np.random.Generator | None = None) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        return self.mu + self.sigma * _rng(rng_seed).standard_normal((n, self.dim))

    def _cdf(self, x: np.ndarray) -> np.ndarray:
        return stats.norm.cdf(x, loc=self.mu[0], scale=self.sigma)

    def params(self) -> np.ndarray:
        return np.concatenate([self.mu, [self.sigma]])

    def to_spec(self) -> dict[str, Any]:
        mu = [float(v) for v in self.mu]
        return {"family": self.family, "dim": self.dim, "mu": mu[0] if self.dim == 1 else mu, "sigma": float(self.sigma)}

    def support(self) -> tuple[float, float]:
        return float(self.mu.min() - 8.0 * self.sigma), float(self.mu.max() + 8.0 * self.sigma)


@dataclass(frozen=True, eq=False)
class GaussianMixture2Target(TargetDensity):
    """alpha N(mu1, sigma1^2) + (1 - alpha) N(mu2, sigma2^2) on the line."""

    family: ClassVar[str] = "gaussian_mixture2"

    alpha: float = 0.5
    mu1: float = 0.0
    sigma1: float = 1.0
    mu2: float = 0.0
    sigma2: float = 1.0
    dim: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ValueError("component scales must be positive")
        if self.dim != 1:
            raise UnsupportedDimensionError(self.dim, "gaussian_mixture2")

    def _component_logs(self, x: np.ndarray) -> np.ndarray:
        u = x[:, 0]
        return np.stack(
            [
                stats.norm.logpdf(u, loc=self.mu1, scale=self.sigma1),
                stats.norm.logpdf(u, loc=self.mu2, scale=self.sigma2),
            ],
            axis=1,
        )

    def _log_density(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self._component_logs(x), axis=1, b=np.array([self.alpha, 1.0 - self.alpha]))

    def _grad_log_density(self, x: np.ndarray) -> np.ndarray:
        logs = self._component_logs(x)
        with np.errstate(divide="ignore"):
            logs = logs + np.log([self.alpha, 1.0 - self.alpha])
        resp = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
        u = x[:, 0]
        slope = resp[:, 0] * (self.mu1 - u) / self.sigma1**2 + resp[:, 1] * (self.mu2 - u) / self.sigma2**2
        return slope[:, None]

    def sample(self, n: int, rng_seed: int | np.random.Generator | None = None) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        rng = _rng(rng_seed)
        first = rng.random(n) < self.alpha
        z = rng.standard_normal(n)
        out = np.where(first, self.mu1 + self.sigma1 * z, self.mu2 + self.sigma2 * z)
        return out[:, None]

    def _cdf(self, x: np.ndarray) -> np.ndarray:
        return self.alpha * stats.norm.cdf(x, self.mu1, self.sigma1) + (1.0 - self.alpha) * stats.norm.cdf(
            x, self.mu2, self.sigma2
        )

    def params(self) -> np.ndarray:
        return np.array([self.alpha, self.mu1, self.sigma1, self.mu2, self.sigma2])

    def support(self) -> tuple[float, float]:
        lo = min(self.mu1 - 8.0 * self.sigma1, self.mu2 - 8.0 * self.sigma2)
        hi = max(self.mu1 + 8.0 * self.sigma1, self.mu2 + 8.0 * self.sigma2)
        return float(lo), float(hi)


FAMILIES: dict[str, type[TargetDensity]] = {
    UniformTaperedTarget.family: UniformTaperedTarget,
    GaussianTarget.family: GaussianTarget,
    GaussianMixture2Target.family: GaussianMixture2Target,
}

FAMILY_PARAMS: dict[str, tuple[str, ...]] = {
    "uniform_tapered": ("a", "b", "w"),
    "gaussian": ("mu", "sigma"),
    "gaussian_mixture2": ("alpha", "mu1", "sigma1", "mu2", "sigma2"),
}

FITTABLE_FAMILIES = ("gaussian", "gaussian_mixture2")


def target_from_params(family: str, theta, dim: int = 1) -> TargetDensity:
    """Rebuild a family member from its parameter vector."""
    theta = np.asarray(theta, dtype=float).ravel()
    if family == "gaussian":
        return GaussianTarget(mu=theta[:dim], sigma=float(theta[dim]), dim=dim)
    if family == "gaussian_mixture2":
        alpha, mu1, s1, mu2, s2 = (float(v) for v in theta)
        return GaussianMixture2Target(alpha=alpha, mu1=mu1, sigma1=s1, mu2=mu2, sigma2=s2)
    if family == "uniform_tapered":
        a, b, w = (float(v) for v in theta)
        return UniformTaperedTarget(a=a, b=b, w=w, dim=dim)
    raise ValueError(f"unknown target family {family!r}")


# ----------------------------------------------------------------------
# maximum likelihood


@dataclass(frozen=True)
class EMRun:
    """One EM restart: its starting split and its log-likelihood before and after."""

    split_quantile: float
    initial_loglik: float
    final_loglik: float
    theta: np.ndarray
    iterations: int
    degenerate: bool


@dataclass(frozen=True)
class MixtureFit:
    best: GaussianMixture2Target
    runs: list[EMRun]


def _mixture_loglik(x: np.ndarray, theta: np.ndarray) -> float:
    alpha, mu1, s1, mu2, s2 = theta
    logs = np.stack([stats.norm.logpdf(x, mu1, s1), stats.norm.logpdf(x, mu2, s2)], axis=1)
    return float(logsumexp(logs, axis=1, b=np.array([alpha, 1.0 - alpha])).sum())


def _em_from(x: np.ndarray, theta: np.ndarray, floor: float, max_iter: int, tol: float) -> tuple[np.ndarray, int, bool]:
    n = x.shape[0]
    previous = -np.inf
    for iteration in range(1, max_iter + 1):
        alpha, mu1, s1, mu2, s2 = theta
        log1 = np.log(alpha) + stats.norm.logpdf(x, mu1, s1)
        log2 = np.log1p(-alpha) + stats.norm.logpdf(x, mu2, s2)
        total = np.logaddexp(log1, log2)
        loglik = float(total.sum())
        r1 = np.exp(log1 - total)
        n1 = float(r1.sum())
        n2 = n - n1
        if n1 < 1e-8 * n or n2 < 1e-8 * n:
            return theta, iteration, True
        mu1 = float(np.dot(r1, x) / n1)
        mu2 = float(np.dot(1.0 - r1, x) / n2)
        s1 = float(np.sqrt(np.dot(r1, (x - mu1) ** 2) / n1))
        s2 = float(np.sqrt(np.dot(1.0 - r1, (x - mu2) ** 2) / n2))
        if s1 < floor or s2 < floor:
            return theta, iteration, True
        theta = np.array([n1 / n, mu1, s1, mu2, s2])
        if abs(loglik - previous) <= tol:
            return theta, iteration, False
        previous = loglik
    return theta, max_iter, False


def fit_mixture_em(
    data,
    restarts: int = EM_RESTARTS,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
) -> MixtureFit:
    """EM for a two-component normal mixture from quantile-split starting points.

    Restarts that collapse (a component scale below 1e-6 times the data sd)
    are discarded; the highest-likelihood survivor wins.
    """
    x = np.asarray(data, dtype=float).reshape(-1)
    if np.asarray(data).ndim == 2 and np.asarray(data).shape[1] != 1:
        raise UnsupportedDimensionError(np.asarray(data).shape[1], "gaussian_mixture2 fit")
    if x.shape[0] < 4:
        raise ValueError("mixture fit needs at least 4 observations")
    floor = 1e-6 * float(x.std())
    splits = np.linspace(0.2, 0.8, restarts) if restarts > 1 else np.array([0.5])

    runs: list[EMRun] = []
    for q in splits:
        cut = np.quantile(x, q)
        lower, upper = x[x <= cut], x[x > cut]
        if lower.size < 2 or upper.size < 2 or lower.std() < floor or upper.std() < floor:
            logger.warning("EM restart at quantile %.2f has a degenerate starting split", q)
            runs.append(EMRun(float(q), -np.inf, -np.inf, np.full(5, np.nan), 0, True))
            continue
        start = np.array([lower.size / x.size, lower.mean(), lower.std(), upper.mean(), upper.std()])
        theta, iterations, degenerate = _em_from(x, start, floor, max_iter, tol)
        if degenerate:
            logger.warning("EM restart at quantile %.2f collapsed after %d iterations", q, iterations)
        runs.append(
            EMRun(
                split_quantile=float(q),
                initial_loglik=_mixture_loglik(x, start),
                final_loglik=-np.inf if degenerate else _mixture_loglik(x, theta),
                theta=theta,
                iterations=iterations,
                degenerate=degenerate,
            )
        )

    survivors = [run for run in runs if not run.degenerate]
    if not survivors:
        raise DegenerateFitError(f"all {len(runs)} EM restarts collapsed")
    best = max(survivors, key=lambda run: run.final_loglik)
    alpha, mu1, s1, mu2, s2 = best.theta
    return MixtureFit(
        best=GaussianMixture2Target(alpha=alpha, mu1=mu1, sigma1=s1, mu2=mu2, sigma2=s2),
        runs=runs,
    )


def mle_fit(family: str, data) -> TargetDensity:
    """Maximum likelihood estimate of a family member from data."""
    arr = np.asarray(data, dtype=float)
    arr = arr.reshape(-1, 1) if arr.ndim <= 1 else arr
    if family == "gaussian":
        if arr.shape[0] < 2:
            raise ValueError("gaussian fit needs at least 2 observations")
        mu = arr.mean(axis=0)
        sigma = float(np.sqrt(np.mean(np.sum((arr - mu) ** 2, axis=1)) / arr.shape[1]))
        if sigma <= 0:
            raise DegenerateFitError("gaussian fit on constant data")
        return GaussianTarget(mu=mu, sigma=sigma, dim=arr.shape[1])
    if family == "gaussian_mixture2":
        return fit_mixture_em(arr).best
    raise ValueError(f"family {family!r} has no maximum likelihood fit")


def log_likelihood(target: TargetDensity, data) -> float:
    """Sum of H over the data."""
    return float(np.sum(target.log_density(np.asarray(data, dtype=float).reshape(-1, target.dim))))
