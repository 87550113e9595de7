"""Transformable rain-kernel dictionary.

Every atom of the dictionary is a coefficient vector over the masked Fourier
basis (one vector per colour channel).  Discretizing the atoms under a shared
inverse transform ``T(theta, s_l, s_w)`` and mixing them with ``alpha`` gives
the K rain kernels ``C[:, :, c, k] = sum_m alpha[m, k] * D[:, :, c, m]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .parametrization import (
    BasisSet,
    TransformParams,
    basis_gradients,
    basis_values,
    build_matrix,
    fit_coefficients_ls,
    matrix_partials,
)

__all__ = [
    "KernelDictionary",
    "RainKernels",
    "basis_for",
    "discretize_kernel",
    "discretize_kernel_partials",
    "dictionary_atoms",
    "build_rain_kernels",
    "kernel_factor_grads",
    "cascade_stage_weights",
    "build_cascade",
    "render_streak",
    "streak_init_dictionary",
    "save_dictionary",
    "load_dictionary",
]

_DICT_MAGIC = b"RFK1"

_BASES: dict[int, BasisSet] = {}


def basis_for(p: int) -> BasisSet:
    """Shared, immutable basis for kernel size ``p``."""
    if p not in _BASES:
        _BASES[p] = BasisSet(p)
    return _BASES[p]


def _p_from_count(n: int) -> int:
    p = math.isqrt(n // 2)
    if 2 * p * p != n or p % 2 == 0:
        raise ValueError(f"{n} is not a valid basis count 2*p^2 with odd p")
    return p


@dataclass(frozen=True)
class KernelDictionary:
    """Atom coefficients ``coeffs`` of shape (M, N, 3)."""

    coeffs: np.ndarray
    per_atom_theta: bool = False

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.ndim != 3:
            raise ValueError(f"dictionary coefficients must be (M, N, C), got {coeffs.shape}")
        _p_from_count(coeffs.shape[1])
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("dictionary coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def M(self) -> int:
        return self.coeffs.shape[0]

    @property
    def N(self) -> int:
        return self.coeffs.shape[1]

    @property
    def channels(self) -> int:
        return self.coeffs.shape[2]

    @property
    def p(self) -> int:
        return _p_from_count(self.N)

    @property
    def basis(self) -> BasisSet:
        return basis_for(self.p)


@dataclass
class RainKernels:
    """Kernel tensor of shape (p, p, C_out, C_in) plus what produced it."""

    tensor: np.ndarray
    params: TransformParams | None = None
    alpha: np.ndarray | None = None
    cascade_depth: int = 1

    @property
    def p(self) -> int:
        return self.tensor.shape[0]


def _points(basis: BasisSet, params: TransformParams) -> np.ndarray:
    return basis.grid_points @ build_matrix(params).T


def discretize_kernel(coeffs, params: TransformParams) -> np.ndarray:
    """Sample ``sum_n w_n phi_n(T x_ij)`` on the grid.

    ``coeffs`` has length N along its first axis; trailing axes are carried
    through, so (N, C) gives a (p, p, C) result.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    basis = basis_for(_p_from_count(coeffs.shape[0]))
    vals = basis_values(basis, _points(basis, params))
    return np.tensordot(vals, coeffs, axes=(1, 0)).reshape((basis.p, basis.p) + coeffs.shape[1:])


def discretize_kernel_partials(coeffs, params: TransformParams) -> dict[str, np.ndarray]:
    """Derivatives of :func:`discretize_kernel` w.r.t. theta, s_l and s_w."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    basis = basis_for(_p_from_count(coeffs.shape[0]))
    x = basis.grid_points
    grads = basis_gradients(basis, x @ build_matrix(params).T)  # (P, N, 2)
    shape = (basis.p, basis.p) + coeffs.shape[1:]
    out = {}
    for name, dT in matrix_partials(params).items():
        directional = np.einsum("pnk,pk->pn", grads, x @ dT.T)
        out[name] = np.tensordot(directional, coeffs, axes=(1, 0)).reshape(shape)
    return out


def _thetas(dictionary: KernelDictionary, theta_rad) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta_rad, dtype=np.float64))
    if dictionary.per_atom_theta:
        if theta.shape != (dictionary.M,):
            raise ValueError(f"per-atom theta needs {dictionary.M} angles, got shape {theta.shape}")
        return theta
    if theta.size != 1:
        raise ValueError("scalar theta expected (enable per_atom_theta for vectors)")
    return theta


def dictionary_atoms(dictionary: KernelDictionary, theta_rad, s_l: float, s_w: float) -> np.ndarray:
    """Discretized dictionary D of shape (p, p, C, M)."""
    thetas = _thetas(dictionary, theta_rad)
    p = dictionary.p
    if thetas.size == 1:
        D = discretize_kernel(dictionary.coeffs.transpose(1, 2, 0), TransformParams(float(thetas[0]), s_l, s_w))
        return D
    atoms = [
        discretize_kernel(dictionary.coeffs[m], TransformParams(float(t), s_l, s_w))
        for m, t in enumerate(thetas)
    ]
    return np.stack(atoms, axis=-1).reshape(p, p, dictionary.channels, dictionary.M)


def _dictionary_atom_partials(dictionary, theta_rad, s_l, s_w):
    thetas = _thetas(dictionary, theta_rad)
    if thetas.size == 1:
        return discretize_kernel_partials(
            dictionary.coeffs.transpose(1, 2, 0), TransformParams(float(thetas[0]), s_l, s_w)
        )
    per_atom = [
        discretize_kernel_partials(dictionary.coeffs[m], TransformParams(float(t), s_l, s_w))
        for m, t in enumerate(thetas)
    ]
    out = {k: np.stack([d[k] for d in per_atom], axis=-1) for k in ("s_l", "s_w")}
    # per-atom theta: one (p, p, C, M) slice where only atom m is non-zero
    out["theta"] = np.stack([d["theta"] for d in per_atom], axis=-1)
    return out


def _check_alpha(alpha, M: int) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 2 or alpha.shape[0] != M:
        raise ValueError(f"alpha must have shape ({M}, K), got {alpha.shape}")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("alpha must be finite")
    return alpha


def _factor_values(factors):
    theta = np.radians(np.asarray(factors.theta, dtype=np.float64))
    return theta, float(factors.s_l), float(factors.s_w)


def build_rain_kernels(dictionary: KernelDictionary, alpha, factors) -> RainKernels:
    """Mix the transformed dictionary into K kernels of shape (p, p, 3, K).

    ``factors`` needs ``theta`` (degrees), ``s_l`` and ``s_w`` attributes;
    ``alpha`` defaults to ``factors.alpha`` when None.
    """
    if alpha is None:
        alpha = factors.alpha
    alpha = _check_alpha(alpha, dictionary.M)
    theta, s_l, s_w = _factor_values(factors)
    D = dictionary_atoms(dictionary, theta, s_l, s_w)
    params = TransformParams(float(theta.ravel()[0]) if theta.size == 1 else 0.0, s_l, s_w)
    return RainKernels(D @ alpha, params=params, alpha=alpha)


def kernel_factor_grads(dictionary: KernelDictionary, alpha, factors) -> dict[str, np.ndarray]:
    """Partial derivatives of the mixed kernels.

    Returns ``theta``, ``s_l``, ``s_w`` as (p, p, 3, K) tensors (``theta`` is
    (M, p, p, 3, K) with per-atom angles; the derivative is per radian) and
    ``alpha`` as the (p, p, 3, M) dictionary, since dC[..., k]/dalpha[m, k] = D[..., m].
    """
    if alpha is None:
        alpha = factors.alpha
    alpha = _check_alpha(alpha, dictionary.M)
    theta, s_l, s_w = _factor_values(factors)
    parts = _dictionary_atom_partials(dictionary, theta, s_l, s_w)
    out = {"s_l": parts["s_l"] @ alpha, "s_w": parts["s_w"] @ alpha}
    if dictionary.per_atom_theta:
        dth = parts["theta"]  # (p, p, C, M)
        out["theta"] = np.einsum("ijcm,mk->mijck", dth, alpha)
    else:
        out["theta"] = parts["theta"] @ alpha
    out["alpha"] = dictionary_atoms(dictionary, theta, s_l, s_w)
    return out


# -- cascade -----------------------------------------------------------------


def cascade_stage_weights(dictionary: KernelDictionary, K: int, depth: int, seed: int = 0) -> list[np.ndarray]:
    """Fixed mixing weights for the depth-1 intermediate (K -> K) stages.

    Weights are positive and scaled so every intermediate kernel sums to one
    at the identity transform; the stages then stretch streaks without
    changing total intensity much.
    """
    if depth < 1:
        raise ValueError("cascade depth must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5747,)))
    mono = dictionary_atoms(dictionary, np.zeros(dictionary.M) if dictionary.per_atom_theta else 0.0, 1.0, 1.0)
    mass = mono.mean(axis=2).sum(axis=(0, 1))  # (M,)
    weights = []
    for _ in range(depth - 1):
        u = rng.uniform(0.5, 1.5, size=(dictionary.M, K))
        total = mass @ u
        if np.any(np.abs(total) < 1e-12):
            raise ValueError("dictionary atoms have zero mass; cannot normalize cascade stages")
        weights.append(u / total)
    return weights


def _diagonal_stage(mono: np.ndarray, beta: np.ndarray) -> np.ndarray:
    p = mono.shape[0]
    K = beta.shape[1]
    diag = mono @ beta  # (p, p, K)
    out = np.zeros((p, p, K, K))
    idx = np.arange(K)
    out[:, :, idx, idx] = diag
    return out


def build_cascade(dictionary: KernelDictionary, alpha, factors, stage_weights=()) -> list[RainKernels]:
    """Kernels for every cascade stage, final (K -> 3) stage last.

    Intermediate stages are channel-wise: map k is filtered by the
    channel-averaged atoms mixed with that stage's own weights.  All stages
    share the dictionary and the transform.
    """
    final = build_rain_kernels(dictionary, alpha, factors)
    depth = len(stage_weights) + 1
    final.cascade_depth = depth
    if depth == 1:
        return [final]
    theta, s_l, s_w = _factor_values(factors)
    mono = dictionary_atoms(dictionary, theta, s_l, s_w).mean(axis=2)
    stages = [
        RainKernels(_diagonal_stage(mono, np.asarray(beta)), params=final.params, alpha=np.asarray(beta), cascade_depth=depth)
        for beta in stage_weights
    ]
    return stages + [final]


def cascade_kernel_partials(dictionary: KernelDictionary, alpha, factors, stage_weights=()) -> list[dict[str, np.ndarray]]:
    """Per-stage d(kernel)/d{theta, s_l, s_w}, aligned with :func:`build_cascade`.

    Scalar theta only.
    """
    if dictionary.per_atom_theta:
        raise ValueError("cascade partials support scalar theta only")
    theta, s_l, s_w = _factor_values(factors)
    parts = _dictionary_atom_partials(dictionary, theta, s_l, s_w)
    out = []
    for beta in stage_weights:
        beta = np.asarray(beta)
        out.append({k: _diagonal_stage(v.mean(axis=2), beta) for k, v in parts.items()})
    alpha = _check_alpha(factors.alpha if alpha is None else alpha, dictionary.M)
    out.append({k: v @ alpha for k, v in parts.items()})
    return out


# -- streak initialization ---------------------------------------------------


def render_streak(p: int, length: float, sigma: float, peak: float) -> np.ndarray:
    """Anti-aliased vertical segment through the centre of a p x p tile.

    Gaussian cross-profile of width ``sigma``; each end of the segment is
    box-filtered over one pixel.
    """
    basis = basis_for(p)
    x1 = basis.grid[..., 0]
    x2 = basis.grid[..., 1]
    along = np.clip(length / 2.0 + 0.5 - np.abs(x2), 0.0, 1.0)
    across = np.exp(-(x1**2) / (2.0 * sigma**2))
    return peak * along * across


def streak_init_dictionary(p: int = 11, M: int = 30, seed: int = 0, channels: int = 3) -> KernelDictionary:
    """Dictionary whose atoms are thin vertical streaks of random shape."""
    if p % 2 == 0 or p < 1:
        raise ValueError(f"kernel size must be odd, got {p}")
    if M < 1:
        raise ValueError("need at least one atom")
    rng = np.random.default_rng(seed)
    basis = basis_for(p)
    coeffs = np.empty((M, basis.N, channels))
    for m in range(M):
        length = rng.uniform(0.4 * p, 0.9 * p)
        sigma = rng.uniform(0.5, 1.0)
        peak = rng.uniform(0.5, 1.0)
        w = fit_coefficients_ls(basis, render_streak(p, length, sigma, peak))
        coeffs[m] = w[:, None]
    return KernelDictionary(coeffs)


# -- serialization -----------------------------------------------------------


def save_dictionary(dictionary: KernelDictionary, path) -> None:
    """Write the RFK1 container: magic, u32 p/M/N/C, float64 atom-major."""
    header = _DICT_MAGIC + struct.pack("<4I", dictionary.p, dictionary.M, dictionary.N, dictionary.channels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dictionary.coeffs, dtype="<f8").tobytes())


def load_dictionary(path, per_atom_theta: bool = False) -> KernelDictionary:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != _DICT_MAGIC:
        raise ValueError(f"{path}: not an RFK1 dictionary file")
    p, M, N, C = struct.unpack("<4I", data[4:20])
    if N != 2 * p * p:
        raise ValueError(f"{path}: inconsistent header (p={p}, N={N})")
    body = data[20:]
    if len(body) != 8 * M * N * C:
        raise ValueError(f"{path}: expected {M * N * C} coefficients, found {len(body) // 8}")
    coeffs = np.frombuffer(body, dtype="<f8").reshape(M, N, C).astype(np.float64)
    return KernelDictionary(coeffs, per_atom_theta=per_atom_theta)
