"""Multivariate kernel families and bandwidth matrices for matching smoothers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

KERNEL_FAMILIES = ("gaussian", "epanechnikov-product", "uniform-box")

# Second moment of the univariate marginal, per family: the scaled kernel
# satisfies  integral z z^T K(z) dz = mu2 * I.
_MU2 = {
    "gaussian": 1.0,
    "epanechnikov-product": 0.2,
    "uniform-box": 1.0 / 3.0,
}


@dataclass(frozen=True)
class KernelSpec:
    """A symmetric multivariate density used for matching weights.

    Families
    --------
    gaussian
        Standard normal product density; strictly positive everywhere.
    epanechnikov-product
        Product of univariate Epanechnikov densities on [-1, 1]^d.
    uniform-box
        Constant density on [-1, 1]^d.
    """

    family: str = "gaussian"

    def __post_init__(self) -> None:
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(
                f"unknown kernel family {self.family!r}; choose from {KERNEL_FAMILIES}"
            )

    @property
    def compact_support(self) -> bool:
        return self.family != "gaussian"

    @property
    def second_moment(self) -> float:
        return _MU2[self.family]

    def density(self, z: ArrayLike) -> NDArray[np.float64]:
        """Evaluate the kernel at scaled displacement rows z of shape (..., d)."""
        z = np.asarray(z, dtype=np.float64)
        d = z.shape[-1]
        if self.family == "gaussian":
            return np.exp(-0.5 * np.einsum("...k,...k->...", z, z)) * (
                (2.0 * np.pi) ** (-0.5 * d)
            )
        if self.family == "epanechnikov-product":
            inside = np.clip(1.0 - z * z, 0.0, None)
            return np.prod(0.75 * inside, axis=-1)
        # uniform box
        return np.where(np.abs(z).max(axis=-1) <= 1.0, 0.5**d, 0.0)


@dataclass(frozen=True)
class BandwidthMatrix:
    """Symmetric positive-definite bandwidth for multivariate smoothing.

    Stores the matrix together with its inverse square root and the
    determinant factor used by the scaled kernel
    ``k_h(x) = det(H)^{-1/2} K(H^{-1/2} x)``.
    """

    matrix: NDArray[np.float64]
    inv_sqrt: NDArray[np.float64] = field(init=False, repr=False)
    det_factor: float = field(init=False, repr=False)

    def __post_init__(self) -> None:
        H = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if H.shape[0] != H.shape[1]:
            raise ValueError("bandwidth matrix must be square")
        if not np.allclose(H, H.T, atol=1e-12, rtol=0.0):
            raise ValueError("bandwidth matrix must be symmetric (tolerance 1e-12)")
        evals, evecs = np.linalg.eigh(H)
        if evals.min() <= 0.0:
            raise ValueError("bandwidth matrix must be positive definite")
        inv_sqrt = (evecs / np.sqrt(evals)) @ evecs.T
        H.setflags(write=False)
        inv_sqrt.setflags(write=False)
        object.__setattr__(self, "matrix", H)
        object.__setattr__(self, "inv_sqrt", inv_sqrt)
        object.__setattr__(self, "det_factor", float(1.0 / np.sqrt(np.prod(evals))))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @staticmethod
    def isotropic(h: float, d: int) -> "BandwidthMatrix":
        """Bandwidth h^2 * I, i.e. scalar smoothing length h in every direction."""
        if h <= 0:
            raise ValueError("bandwidth h must be positive")
        return BandwidthMatrix(np.eye(d) * h * h)

    @staticmethod
    def from_spec(value, d: int) -> "BandwidthMatrix":
        """Coerce a scalar h, a per-axis vector of h's, or a full matrix."""
        if isinstance(value, BandwidthMatrix):
            if value.dim != d:
                raise ValueError(f"bandwidth dimension {value.dim} != covariate dimension {d}")
            return value
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            return BandwidthMatrix.isotropic(float(arr), d)
        if arr.ndim == 1:
            if arr.size != d:
                raise ValueError(f"per-axis bandwidth needs {d} entries, got {arr.size}")
            if (arr <= 0).any():
                raise ValueError("per-axis bandwidths must be positive")
            return BandwidthMatrix(np.diag(arr * arr))
        if arr.shape != (d, d):
            raise ValueError(f"bandwidth matrix must be {d}x{d}, got {arr.shape}")
        return BandwidthMatrix(arr)


def default_bandwidth(n: int, d: int, scale: float = 1.0) -> float:
    """Rate-valid default smoothing length, shrinking like n^(-1/(d+4))."""
    if n < 1:
        raise ValueError("n must be positive")
    return scale * float(n) ** (-1.0 / (d + 4))


def scaled_kernel(
    diffs: NDArray[np.float64], bandwidth: BandwidthMatrix, kernel: KernelSpec
) -> NDArray[np.float64]:
    """Evaluate det(H)^{-1/2} K(H^{-1/2} x) on displacement rows of shape (..., d)."""
    z = diffs @ bandwidth.inv_sqrt.T
    return bandwidth.det_factor * kernel.density(z)
