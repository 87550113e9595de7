"""Rain-factor distributions and reproducible per-image draws.

Each image gets its own random stream derived from ``(master_seed,
image_index)`` through :class:`numpy.random.SeedSequence`, so image i can be
regenerated without drawing images 0..i-1 first.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FactorDistribution",
    "FactorConfig",
    "RainFactorSample",
    "image_rng",
    "sample_factors",
    "alpha_digest",
]

# purpose tags inside one image's stream family
STREAM_FACTORS = 0
STREAM_NOISE = 1


@dataclass(frozen=True)
class FactorDistribution:
    """``constant``, ``uniform`` or (optionally clipped) ``gaussian``."""

    kind: str = "constant"
    value: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    mean: float = 0.0
    sd: float = 0.0
    clip_lo: float = -np.inf
    clip_hi: float = np.inf

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "gaussian"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "uniform" and not self.lo <= self.hi:
            raise ValueError(f"uniform bounds out of order: {self.lo} > {self.hi}")
        if self.kind == "gaussian" and not self.sd >= 0:
            raise ValueError(f"gaussian sd must be >= 0, got {self.sd}")
        if not self.clip_lo <= self.clip_hi:
            raise ValueError("clip bounds out of order")

    @classmethod
    def constant(cls, v):
        return cls("constant", value=float(v))

    @classmethod
    def uniform(cls, lo, hi):
        return cls("uniform", lo=float(lo), hi=float(hi))

    @classmethod
    def gaussian(cls, mean, sd, clip_lo=-np.inf, clip_hi=np.inf):
        return cls("gaussian", mean=float(mean), sd=float(sd), clip_lo=float(clip_lo), clip_hi=float(clip_hi))

    @classmethod
    def from_dict(cls, d) -> "FactorDistribution":
        """Parse ``{"constant": v}``, ``{"uniform": [lo, hi]}``,
        ``{"gaussian": [mean, sd, clip_lo?, clip_hi?]}`` or a bare number."""
        if isinstance(d, (int, float)):
            return cls.constant(d)
        if not isinstance(d, dict) or len(d) != 1:
            raise ValueError(f"cannot parse factor distribution {d!r}")
        (kind, args), = d.items()
        args = [args] if isinstance(args, (int, float)) else list(args)
        args = [(-np.inf if a is None and i == 2 else np.inf if a is None else a) for i, a in enumerate(args)]
        if kind == "constant":
            return cls.constant(*args)
        if kind == "uniform":
            return cls.uniform(*args)
        if kind == "gaussian":
            return cls.gaussian(*args)
        raise ValueError(f"unknown distribution kind {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"constant": self.value}
        if self.kind == "uniform":
            return {"uniform": [self.lo, self.hi]}
        clip = [None if np.isinf(self.clip_lo) else self.clip_lo, None if np.isinf(self.clip_hi) else self.clip_hi]
        return {"gaussian": [self.mean, self.sd] + clip}

    def draw(self, rng: np.random.Generator, size=None):
        if self.kind == "constant":
            out = np.full(size if size is not None else (), self.value)
        elif self.kind == "uniform":
            out = rng.uniform(self.lo, self.hi, size)
        else:
            out = np.clip(self.mean + self.sd * rng.standard_normal(size), self.clip_lo, self.clip_hi)
        return float(out) if size is None else np.asarray(out, dtype=np.float64)


def _default_alpha(M):
    return FactorDistribution.gaussian(1.0 / M, 1.0 / (2 * M), 0.0, np.inf)


@dataclass(frozen=True)
class FactorConfig:
    """Per-factor distributions.  Theta is in degrees."""

    theta: FactorDistribution = FactorDistribution.gaussian(0.0, 20.0, -40.0, 40.0)
    s_l: FactorDistribution = FactorDistribution.uniform(0.6, 0.7)
    s_w: FactorDistribution = FactorDistribution.constant(1.15)
    tau: FactorDistribution = FactorDistribution.gaussian(1.0, 0.25)
    alpha: FactorDistribution | None = None  # None: gaussian(1/M, 1/(2M)) clipped at 0

    def alpha_distribution(self, M: int) -> FactorDistribution:
        return self.alpha if self.alpha is not None else _default_alpha(M)

    def replace(self, **changes) -> "FactorConfig":
        fields = {k: getattr(self, k) for k in ("theta", "s_l", "s_w", "tau", "alpha")}
        fields.update(changes)
        return FactorConfig(**fields)

    @classmethod
    def from_dict(cls, d: dict | None) -> "FactorConfig":
        d = dict(d or {})
        unknown = set(d) - {"theta", "s_l", "s_w", "tau", "alpha"}
        if unknown:
            raise ValueError(f"unknown factor keys: {sorted(unknown)}")
        return cls(**{k: FactorDistribution.from_dict(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        out = {k: getattr(self, k).to_dict() for k in ("theta", "s_l", "s_w", "tau")}
        if self.alpha is not None:
            out["alpha"] = self.alpha.to_dict()
        return out


@dataclass
class RainFactorSample:
    """One draw of every rain factor.  ``theta`` is in degrees."""

    theta: float | np.ndarray
    s_l: float
    s_w: float
    alpha: np.ndarray
    tau: float
    master_seed: int | None = None
    stream_id: int | None = None

    def __post_init__(self):
        if not (self.s_l > 0 and self.s_w > 0):
            raise ValueError(f"scales must be positive after clipping, got s_l={self.s_l}, s_w={self.s_w}")
        self.alpha = np.asarray(self.alpha, dtype=np.float64)

    @property
    def theta_rad(self):
        return np.radians(self.theta)

    @property
    def theta_scalar_deg(self) -> float:
        """Angle shared by the rain map and merge nets (mean of per-atom angles)."""
        return float(np.mean(self.theta))

    def replace(self, **changes) -> "RainFactorSample":
        fields = {k: getattr(self, k) for k in ("theta", "s_l", "s_w", "alpha", "tau", "master_seed", "stream_id")}
        fields.update(changes)
        return RainFactorSample(**fields)


def image_rng(master_seed: int, image_index: int, purpose: int) -> np.random.Generator:
    """Generator for one purpose of one image; independent of other images."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(image_index), int(purpose))))


def sample_factors(config: FactorConfig, M: int, K: int, rng=None, *, master_seed: int | None = None,
                   stream_id: int | None = None, per_atom_theta: bool = False) -> RainFactorSample:
    """Draw every factor independently.

    Pass either an explicit ``rng`` or ``master_seed`` + ``stream_id``; the
    latter derives the image's own stream.
    """
    if rng is None:
        if master_seed is None or stream_id is None:
            raise ValueError("need an rng or (master_seed, stream_id)")
        rng = image_rng(master_seed, stream_id, STREAM_FACTORS)
    theta = config.theta.draw(rng, M if per_atom_theta else None)
    s_l = config.s_l.draw(rng)
    s_w = config.s_w.draw(rng)
    tau = config.tau.draw(rng)
    alpha = config.alpha_distribution(M).draw(rng, (M, K))
    return RainFactorSample(theta, s_l, s_w, alpha, tau, master_seed, stream_id)


def alpha_digest(alpha) -> str:
    """SHA-256 of the little-endian float64 bytes of ``alpha``."""
    arr = np.ascontiguousarray(alpha, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()
