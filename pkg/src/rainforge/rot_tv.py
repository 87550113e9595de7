"""Rotatable total variation of a rain layer.

The vertical difference filter is projected onto the masked Fourier basis
and re-sampled at rotated grid points, giving a difference filter
aligned with any streak angle.  Along the true streak direction the filtered
rain layer is sparsest, so scanning the L1 score over angles recovers the
orientation.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .conv import depthwise_same
from .parametrization import BasisSet, TransformParams, project_coefficients
from .rain_kernel import basis_for, discretize_kernel, discretize_kernel_partials

__all__ = [
    "VERTICAL_DIFFERENCE",
    "DEFAULT_FILTER_SIZE",
    "DEFAULT_SMOOTHING",
    "embed_filter",
    "DiffFilterSpec",
    "rotated_diff_filter",
    "rotated_diff_filter_derivative",
    "rot_tv_loss",
    "rot_tv_grads",
    "orientation_scan",
    "scan_to_csv",
]

VERTICAL_DIFFERENCE = np.array([[0.0, -0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.5, 0.0]])

DEFAULT_FILTER_SIZE = 11
DEFAULT_SMOOTHING = 1.0
_SMOOTHING_RADIUS = 3
_SCAN_BATCH = 16


def embed_filter(filt, p: int) -> np.ndarray:
    """Zero-pad a small odd filter to p x p, keeping it centred."""
    filt = np.asarray(filt, dtype=np.float64)
    q = filt.shape[0]
    if q > p or (p - q) % 2:
        raise ValueError(f"cannot centre a {q}x{q} filter in {p}x{p}")
    out = np.zeros((p, p))
    o = (p - q) // 2
    out[o : o + q, o : o + q] = filt
    return out


@dataclass(frozen=True)
class DiffFilterSpec:
    """Base difference filter and the basis size it is projected onto.

    The 3x3 central difference is embedded in a ``p`` x ``p`` tile and
    blurred by a Gaussian of width ``smoothing`` pixels (cut 3 pixels out, so
    the result stays inside the unmasked disc).  The raw difference is
    mostly high frequency, and its rotated copies alias on the pixel grid:
    at p = 3 a 20 degree streak scores best near 34 degrees, and even at
    p = 11 short streaks read 4 to 7 degrees off at 20 and 30 degrees.  The
    blur removes that bias.  ``smoothing = 0`` gives the plain difference.
    """

    base: np.ndarray = field(default_factory=lambda: VERTICAL_DIFFERENCE.copy())
    p: int = DEFAULT_FILTER_SIZE
    smoothing: float = DEFAULT_SMOOTHING

    def __post_init__(self):
        if self.smoothing < 0:
            raise ValueError("smoothing must be >= 0")

    @property
    def basis(self) -> BasisSet:
        return basis_for(self.p)

    @property
    def embedded(self) -> np.ndarray:
        tile = embed_filter(self.base, self.p)
        if self.smoothing > 0:
            tile = gaussian_filter(tile, self.smoothing, mode="constant", truncate=_SMOOTHING_RADIUS / self.smoothing)
        return tile

    @property
    def coefficients(self) -> np.ndarray:
        return project_coefficients(self.basis, self.embedded)


_COEFF_CACHE: dict[int, np.ndarray] = {}


def _coeffs(spec: DiffFilterSpec | None) -> np.ndarray:
    if spec is None:
        if DEFAULT_FILTER_SIZE not in _COEFF_CACHE:
            _COEFF_CACHE[DEFAULT_FILTER_SIZE] = DiffFilterSpec().coefficients
        return _COEFF_CACHE[DEFAULT_FILTER_SIZE]
    return spec.coefficients


def rotated_diff_filter(theta: float, spec: DiffFilterSpec | None = None) -> np.ndarray:
    """Difference filter rotated by ``theta`` radians (p x p)."""
    return discretize_kernel(_coeffs(spec), TransformParams(float(theta)))


def rotated_diff_filter_derivative(theta: float, spec: DiffFilterSpec | None = None) -> np.ndarray:
    return discretize_kernel_partials(_coeffs(spec), TransformParams(float(theta)))["theta"]


def _as_layer(rain_layer) -> np.ndarray:
    rain_layer = np.asarray(rain_layer, dtype=np.float64)
    return rain_layer[..., None] if rain_layer.ndim == 2 else rain_layer


def rot_tv_loss(rain_layer, theta: float, spec: DiffFilterSpec | None = None) -> float:
    """Sum over pixels and channels of |D(theta) (x) R|, zero padded."""
    response = depthwise_same(_as_layer(rain_layer), rotated_diff_filter(theta, spec))
    return float(np.abs(response).sum())


def rot_tv_grads(rain_layer, theta: float, spec: DiffFilterSpec | None = None):
    """Loss, d/dR and d/dtheta (subgradient sign(0) = 0)."""
    layer = _as_layer(rain_layer)
    filt = rotated_diff_filter(theta, spec)
    response = depthwise_same(layer, filt)
    sign = np.sign(response)
    grad_r = depthwise_same(sign, filt[::-1, ::-1]).reshape(np.shape(rain_layer))
    dresp = depthwise_same(layer, rotated_diff_filter_derivative(theta, spec))
    return float(np.abs(response).sum()), grad_r, float(np.sum(sign * dresp))


def orientation_scan(rain_layer, theta_grid_deg, spec: DiffFilterSpec | None = None):
    """Score every angle (degrees) and return ``(best_deg, losses)``.

    Ties go to the angle with the smallest magnitude.
    """
    grid = np.asarray(theta_grid_deg, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ValueError("orientation scan needs a non-empty angle grid")
    layer = _as_layer(rain_layer)
    losses = np.empty(grid.size)
    for a in range(0, grid.size, _SCAN_BATCH):
        filters = np.stack([rotated_diff_filter(np.radians(t), spec) for t in grid[a : a + _SCAN_BATCH]])
        losses[a : a + _SCAN_BATCH] = np.abs(depthwise_same(layer, filters)).sum(axis=(0, 1, 2))
    best = losses.min()
    ties = np.flatnonzero(losses == best)
    pick = ties[np.argmin(np.abs(grid[ties]))]
    return float(grid[pick]), losses


def scan_to_csv(theta_grid_deg, losses) -> str:
    buf = io.StringIO()
    buf.write("theta_degrees,loss\n")
    for t, l in zip(theta_grid_deg, losses):
        buf.write(f"{float(t)!r},{float(l)!r}\n")
    return buf.getvalue()
