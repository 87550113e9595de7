"""Fourier-series filter parametrization with a radial mask.

A p x p filter is treated as samples of a continuous function

    phi(x) = sum_n w_n * Lambda(|x|) * trig(f_n . x)

on the lattice x_ij in [-(p-1)/2, (p-1)/2]^2.  Because the basis is defined
everywhere in the plane, the filter can be re-sampled at transformed
coordinates T . x_ij, which is what makes rotation and scaling of kernels
possible.

Conventions
-----------
x1 points right, x2 points up; image row i grows downward, so grid point
(i, j) sits at (j - c, c - i) with c = (p - 1) / 2.  Angles are radians.
Basis index n < p**2 are cosine terms, n >= p**2 sine terms; inside each
block the order is row-major over (k, l).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BasisSet",
    "TransformParams",
    "radial_mask",
    "radial_mask_derivative",
    "eval_basis",
    "eval_basis_gradient",
    "basis_values",
    "basis_gradients",
    "build_matrix",
    "matrix_partials",
    "fit_coefficients_ls",
    "project_coefficients",
    "reconstruct",
]


@dataclass(frozen=True)
class BasisSet:
    """Masked 2D Fourier basis for one odd kernel size ``p``."""

    p: int
    frequency_index: tuple[tuple[int, int, str], ...] = field(init=False, repr=False)
    frequencies: np.ndarray = field(init=False, repr=False)
    grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = self.p
        if not isinstance(p, (int, np.integer)) or p < 1 or p % 2 == 0:
            raise ValueError(f"kernel size must be an odd positive integer, got {p!r}")
        half = p // 2
        kl = [(k, l) for k in range(p) for l in range(p)]
        index = tuple((k, l, "cos") for k, l in kl) + tuple((k, l, "sin") for k, l in kl)
        freqs = (2.0 * np.pi / p) * np.array([(k - half, l - half) for k, l in kl], dtype=np.float64)
        c = (p - 1) / 2.0
        ii, jj = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        grid = np.stack([jj - c, c - ii], axis=-1).astype(np.float64)
        object.__setattr__(self, "frequency_index", index)
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "grid", grid)
        freqs.setflags(write=False)
        grid.setflags(write=False)

    @property
    def N(self) -> int:
        return 2 * self.p * self.p

    @property
    def mask_inner_radius(self) -> float:
        return (self.p - 1) / 2.0

    @property
    def mask_outer_radius(self) -> float:
        return (self.p + 1) / 2.0

    @property
    def grid_points(self) -> np.ndarray:
        """Grid coordinates flattened row-major to shape (p*p, 2)."""
        return self.grid.reshape(-1, 2)

    def frequency(self, n: int) -> np.ndarray:
        self._check_index(n)
        return self.frequencies[n % (self.p * self.p)]

    def is_sine(self, n: int) -> bool:
        self._check_index(n)
        return n >= self.p * self.p

    def mask(self, r):
        return radial_mask(r, self.p)

    def _check_index(self, n):
        if not 0 <= n < self.N:
            raise IndexError(f"basis index {n} out of range [0, {self.N})")


@dataclass(frozen=True)
class TransformParams:
    """Rotation angle (radians) and inverse length/width scales."""

    theta: float = 0.0
    s_l: float = 1.0
    s_w: float = 1.0

    def __post_init__(self):
        if not (self.s_l > 0 and self.s_w > 0):
            raise ValueError(f"scales must be positive, got s_l={self.s_l}, s_w={self.s_w}")

    @property
    def matrix(self) -> np.ndarray:
        return build_matrix(self)


def radial_mask(r, p: int):
    """Raised-cosine window: 1 inside (p-1)/2, 0 beyond (p+1)/2."""
    r0 = (p - 1) / 2.0
    r1 = (p + 1) / 2.0
    r = np.asarray(r, dtype=np.float64)
    t = np.clip((r - r0) / (r1 - r0), 0.0, 1.0)
    out = 0.5 * (1.0 + np.cos(np.pi * t))
    return out if out.ndim else float(out)


def radial_mask_derivative(r, p: int):
    r0 = (p - 1) / 2.0
    r1 = (p + 1) / 2.0
    r = np.asarray(r, dtype=np.float64)
    inside = (r > r0) & (r < r1)
    t = (r - r0) / (r1 - r0)
    out = np.where(inside, -0.5 * np.pi / (r1 - r0) * np.sin(np.pi * t), 0.0)
    return out if out.ndim else float(out)


def basis_values(basis: BasisSet, points: np.ndarray) -> np.ndarray:
    """Evaluate every basis function at ``points`` (..., 2) -> (..., N)."""
    points = np.asarray(points, dtype=np.float64)
    r = np.sqrt(np.sum(points * points, axis=-1))
    lam = radial_mask(r, basis.p)
    arg = points @ basis.frequencies.T
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=-1) * np.asarray(lam)[..., None]


def basis_gradients(basis: BasisSet, points: np.ndarray) -> np.ndarray:
    """Spatial gradients of every basis function: (..., 2) -> (..., N, 2)."""
    points = np.asarray(points, dtype=np.float64)
    r = np.sqrt(np.sum(points * points, axis=-1))
    lam = np.asarray(radial_mask(r, basis.p))
    dlam = np.asarray(radial_mask_derivative(r, basis.p))
    # dlam is nonzero only on the rolloff annulus, where r > 0
    safe_r = np.where(r > 0, r, 1.0)
    radial = (dlam / safe_r)[..., None] * points  # (..., 2)

    arg = points @ basis.frequencies.T
    c, s = np.cos(arg), np.sin(arg)
    trig = np.concatenate([c, s], axis=-1)
    dtrig = np.concatenate([-s, c], axis=-1)
    freqs = np.concatenate([basis.frequencies, basis.frequencies], axis=0)  # (N, 2)
    return trig[..., None] * radial[..., None, :] + (lam[..., None] * dtrig)[..., None] * freqs


def eval_basis(basis: BasisSet, n: int, point) -> float:
    basis._check_index(n)
    return float(basis_values(basis, np.asarray(point, dtype=np.float64))[n])


def eval_basis_gradient(basis: BasisSet, n: int, point) -> np.ndarray:
    basis._check_index(n)
    return basis_gradients(basis, np.asarray(point, dtype=np.float64))[n]


def build_matrix(params: TransformParams) -> np.ndarray:
    """Inverse coordinate transform diag(s_w, s_l) @ R(theta)."""
    if not (params.s_l > 0 and params.s_w > 0):
        raise ValueError("scales must be positive")
    c, s = math.cos(params.theta), math.sin(params.theta)
    return np.array(
        [[params.s_w * c, -params.s_w * s], [params.s_l * s, params.s_l * c]],
        dtype=np.float64,
    )


def matrix_partials(params: TransformParams) -> dict[str, np.ndarray]:
    """Partial derivatives of :func:`build_matrix` w.r.t. theta, s_l, s_w."""
    c, s = math.cos(params.theta), math.sin(params.theta)
    return {
        "theta": np.array([[-params.s_w * s, -params.s_w * c], [params.s_l * c, -params.s_l * s]]),
        "s_l": np.array([[0.0, 0.0], [s, c]]),
        "s_w": np.array([[c, -s], [0.0, 0.0]]),
    }


def _check_filter(basis: BasisSet, filt) -> np.ndarray:
    filt = np.asarray(filt, dtype=np.float64)
    if filt.shape != (basis.p, basis.p):
        raise ValueError(f"filter shape {filt.shape} does not match basis size {basis.p}")
    return filt


def fit_coefficients_ls(basis: BasisSet, filt) -> np.ndarray:
    """Minimum-norm least-squares coefficients reproducing ``filt`` on the grid.

    Grid points where the mask vanishes give zero rows in the design matrix,
    so those pixels cannot be represented and are reconstructed as zero.
    """
    filt = _check_filter(basis, filt)
    design = basis_values(basis, basis.grid_points)
    coeffs, *_ = np.linalg.lstsq(design, filt.ravel(), rcond=None)
    return coeffs


def project_coefficients(basis: BasisSet, filt) -> np.ndarray:
    """Fast projection w_n = p**-2 * sum_st filt_st * phi_n(x_st)."""
    filt = _check_filter(basis, filt)
    design = basis_values(basis, basis.grid_points)
    return design.T @ filt.ravel() / basis.p**2


def reconstruct(basis: BasisSet, coeffs, matrix=None) -> np.ndarray:
    """Sample sum_n w_n phi_n(T x_ij) on the p x p grid (T = identity if omitted)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[0] != basis.N:
        raise ValueError(f"expected {basis.N} coefficients, got {coeffs.shape[0]}")
    pts = basis.grid_points
    if matrix is not None:
        pts = pts @ np.asarray(matrix, dtype=np.float64).T
    return np.tensordot(basis_values(basis, pts), coeffs, axes=(1, 0)).reshape(
        (basis.p, basis.p) + coeffs.shape[1:]
    )
