"""Radial reproducing kernels R(x, y) generating the vector-field RKHS V.

The matrix-valued kernel of V is R(x, y)·I, so every operation here works on
the scalar profile R and its spatial derivatives. A radial family only has to
supply its profile rho(r2) with r2 = |x - y|^2 together with the first two
derivatives in r2; everything else (gradients, mixed second derivatives,
Gram matrices, inner products of kernel sections) follows in this base class.
"""

from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np

from flowdense.exceptions import DimensionMismatchError, UnknownSectionKindError

if TYPE_CHECKING:
    from flowdense.flow import KnotSystem

SectionKind = Literal["value", "gradient"]


@dataclass(frozen=True)
class Section:
    """A scalar kernel section: R(., point) or d/dy_component R(., y)|_{y=point}."""

    point: np.ndarray
    kind: SectionKind = "value"
    component: int | None = None


class RadialKernel(ABC):
    """Scalar radial positive-definite kernel with closed-form derivatives."""

    family: str = ""

    def __init__(self, sigma: float, dim: int = 1) -> None:
        if not np.isfinite(sigma) or sigma <= 0:
            raise ValueError(f"bandwidth must be positive, got {sigma}")
        if int(dim) != dim or dim < 1:
            raise ValueError(f"dimension must be a positive integer, got {dim}")
        self.sigma = float(sigma)
        self.dim = int(dim)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(sigma={self.sigma!r}, dim={self.dim})"

    @abstractmethod
    def profile(self, r2: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return rho(r2), rho'(r2), rho''(r2) elementwise."""

    # ------------------------------------------------------------------
    # shape handling

    def as_points(self, x: np.ndarray | Sequence[float] | float) -> np.ndarray:
        """Coerce x to an (m, d) array, raising on a dimension mismatch."""
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1) if self.dim == 1 and arr.shape[0] != 1 else arr.reshape(1, -1)
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"expected points of dimension {self.dim}, got array of shape {np.shape(x)}"
            )
        return arr

    def as_point(self, x: np.ndarray | Sequence[float] | float) -> np.ndarray:
        """Coerce x to a single point of shape (d,)."""
        arr = np.asarray(x, dtype=float).reshape(-1)
        if arr.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"expected a point of dimension {self.dim}, got shape {np.shape(x)}"
            )
        return arr

    @staticmethod
    def _diff(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        diff = x[:, None, :] - y[None, :, :]
        return diff, np.einsum("mpd,mpd->mp", diff, diff)

    # ------------------------------------------------------------------
    # batched evaluations: x (m, d), y (p, d)

    def matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """R(x_a, y_b) as an (m, p) array."""
        _, r2 = self._diff(x, y)
        return self.profile(r2)[0]

    def grad_x_matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """grad_x R(x_a, y_b) as an (m, p, d) array."""
        diff, r2 = self._diff(x, y)
        _, d1, _ = self.profile(r2)
        return 2.0 * d1[..., None] * diff

    def grad_y_matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """grad_y R(x_a, y_b) as an (m, p, d) array."""
        return -self.grad_x_matrix(x, y)

    def hessian_xx_matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """d^2 R / dx_i dx_j at (x_a, y_b) as an (m, p, d, d) array."""
        diff, r2 = self._diff(x, y)
        _, d1, d2 = self.profile(r2)
        outer = diff[..., :, None] * diff[..., None, :]
        eye = np.eye(self.dim)
        return 4.0 * d2[..., None, None] * outer + 2.0 * d1[..., None, None] * eye

    def cross_hessian_matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """d^2 R / dx_i dy_j at (x_a, y_b) as an (m, p, d, d) array."""
        return -self.hessian_xx_matrix(x, y)

    # ------------------------------------------------------------------
    # pointwise operations

    def eval(self, x, y) -> float:
        """R(x, y)."""
        return float(self.matrix(self.as_point(x)[None], self.as_point(y)[None])[0, 0])

    def grad_y(self, x, y) -> np.ndarray:
        """grad_y R(x, y), shape (d,)."""
        return self.grad_y_matrix(self.as_point(x)[None], self.as_point(y)[None])[0, 0]

    def grad_x(self, x, y) -> np.ndarray:
        """grad_x R(x, y), shape (d,)."""
        return self.grad_x_matrix(self.as_point(x)[None], self.as_point(y)[None])[0, 0]

    def cross_hessian(self, x, y) -> np.ndarray:
        """Matrix d^2 R / dx_i dy_j at (x, y), shape (d, d)."""
        return self.cross_hessian_matrix(self.as_point(x)[None], self.as_point(y)[None])[0, 0]

    # ------------------------------------------------------------------
    # Gram matrices and RKHS inner products

    def gram(self, points) -> np.ndarray:
        """Symmetrised Gram matrix G_ij = R(p_i, p_j)."""
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            return np.zeros((0, 0))
        pts = self.as_points(pts)
        g = self.matrix(pts, pts)
        return 0.5 * (g + g.T)

    def rkhs_norm_sq(self, knots: "KnotSystem") -> float:
        """||v||_V^2 = sum_ij (eta_i . eta_j) R(kappa_i, kappa_j) for v = sum_k eta_k R(., kappa_k)."""
        if knots.knots.shape != knots.momenta.shape:
            raise DimensionMismatchError("knot and momentum arrays must have equal shapes")
        if knots.size == 0:
            return 0.0
        g = self.gram(knots.knots)
        value = float(np.einsum("id,ij,jd->", knots.momenta, g, knots.momenta))
        return max(value, 0.0)

    def section_inner_products(self, sections: Sequence[Section]) -> np.ndarray:
        """Gram matrix of V-inner products among scalar kernel sections.

        Uses the reproducing identities
        <R(.,a), R(.,b)> = R(a,b),
        <R(.,a), d_{y_j}R(.,b)> = d_{y_j}R(a,y)|_{y=b},
        <d_{y_i}R(.,a), d_{y_j}R(.,b)> = d^2R/dx_i dy_j (a,b).
        """
        m = len(sections)
        if m == 0:
            return np.zeros((0, 0))
        points = np.stack([self.as_point(s.point) for s in sections])
        comp = np.full(m, -1, dtype=int)
        for idx, section in enumerate(sections):
            if section.kind == "gradient":
                if section.component is None or not 0 <= section.component < self.dim:
                    raise DimensionMismatchError(
                        f"gradient section needs a component in [0, {self.dim}), got {section.component}"
                    )
                comp[idx] = section.component
            elif section.kind != "value":
                raise UnknownSectionKindError(section.kind)
        return self._section_matrix(points, comp, points, comp)

    def _section_matrix(
        self, pa: np.ndarray, ca: np.ndarray, pb: np.ndarray, cb: np.ndarray
    ) -> np.ndarray:
        """Inner products between two section families; c = -1 marks a value section."""
        out = self.matrix(pa, pb)
        ga = ca >= 0
        gb = cb >= 0
        if ga.any() or gb.any():
            gy = self.grad_y_matrix(pa, pb)
            ia, ib = np.nonzero(~ga[:, None] & gb[None, :])
            out[ia, ib] = gy[ia, ib, cb[ib]]
            # <d_{y_i}R(.,a), R(.,b)> = d_{y_i}R(b, y)|_{y=a} = -gy[a, b, i] for radial R
            ia, ib = np.nonzero(ga[:, None] & ~gb[None, :])
            out[ia, ib] = -gy[ia, ib, ca[ia]]
            ia, ib = np.nonzero(ga[:, None] & gb[None, :])
            if ia.size:
                cross = self.cross_hessian_matrix(pa, pb)
                out[ia, ib] = cross[ia, ib, ca[ia], cb[ib]]
        if out.shape[0] == out.shape[1] and pa is pb:
            out = 0.5 * (out + out.T)
        return out


class GaussianKernel(RadialKernel):
    """R(x, y) = exp(-|x - y|^2 / (2 sigma^2))."""

    family = "gaussian"

    def profile(self, r2: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s2 = self.sigma * self.sigma
        rho = np.exp(-0.5 * r2 / s2)
        return rho, -rho / (2.0 * s2), rho / (4.0 * s2 * s2)


KERNEL_FAMILIES: dict[str, type[RadialKernel]] = {
    GaussianKernel.family: GaussianKernel,
}


def make_kernel(family: str, sigma: float, dim: int = 1) -> RadialKernel:
    """Build a kernel from its family name."""
    try:
        cls = KERNEL_FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown kernel family {family!r}") from None
    return cls(sigma=sigma, dim=dim)
