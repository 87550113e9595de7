"""Rain map, rain layer and merging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import RotResNetWeights, cascade_conv, init_rot_resnet, rot_resnet_forward
from .rain_kernel import KernelDictionary, build_cascade, cascade_stage_weights, streak_init_dictionary

MAP_GAIN = 0.4

__all__ = [
    "SceneTensors",
    "RainContext",
    "generate_rain_map",
    "sparsity",
    "compose_rain_layer",
    "merge_additive",
    "merge_rotconv",
]


@dataclass
class SceneTensors:
    Z: np.ndarray
    rain_map: np.ndarray
    rain_layer: np.ndarray
    background: np.ndarray
    rainy: np.ndarray


def generate_rain_map(Z, theta: float, tau: float, weights: RotResNetWeights) -> np.ndarray:
    """ReLU(rotResNet(Z, theta) - tau); ``theta`` in radians."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 3 or weights.in_channels != Z.shape[2] or weights.out_channels != Z.shape[2]:
        raise ValueError(f"rain-map net must map {Z.shape[-1]} -> {Z.shape[-1]} channels")
    return np.maximum(rot_resnet_forward(Z, theta, weights) - tau, 0.0)


def sparsity(rain_map) -> float:
    """Fraction of strictly positive entries."""
    rain_map = np.asarray(rain_map)
    if rain_map.size == 0:
        return 0.0
    return float(np.count_nonzero(rain_map > 0)) / rain_map.size


def compose_rain_layer(rain_map, stages) -> np.ndarray:
    """Cascade the kernel stages over the map and clip negative light to zero."""
    return np.maximum(cascade_conv(rain_map, stages), 0.0)


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: rain layer {a.shape} vs background {b.shape}")


def merge_additive(rain_layer, background) -> np.ndarray:
    rain_layer = np.asarray(rain_layer, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    _check_same(rain_layer, background)
    return np.clip(background + rain_layer, 0.0, 1.0)


def merge_rotconv(rain_layer, background, theta: float, weights: RotResNetWeights) -> np.ndarray:
    """Rotatable ResNet over cat(R, B), clipped to [0, 1]."""
    rain_layer = np.asarray(rain_layer, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    _check_same(rain_layer, background)
    if weights.in_channels != 6 or weights.out_channels != 3:
        raise ValueError("merge net must map 6 -> 3 channels")
    x = np.concatenate([rain_layer, background], axis=2)
    return np.clip(rot_resnet_forward(x, theta, weights), 0.0, 1.0)


@dataclass
class RainContext:
    """The fixed parts of the rain generator: dictionary, cascade and map net."""

    dictionary: KernelDictionary
    map_weights: RotResNetWeights
    stage_weights: list = field(default_factory=list)

    def __post_init__(self):
        if self.map_weights.in_channels != self.map_weights.out_channels:
            raise ValueError("rain-map net must keep its channel count")
        for beta in self.stage_weights:
            if np.shape(beta) != (self.dictionary.M, self.K):
                raise ValueError(f"cascade stage weights must be ({self.dictionary.M}, {self.K})")

    @classmethod
    def seeded(cls, p=11, M=30, K=6, cascade_depth=3, seed=0, blocks=2, hidden=16, map_gain=MAP_GAIN,
               per_atom_theta=False, dictionary=None, map_weights=None) -> "RainContext":
        """Streak-initialized dictionary and seeded map net.

        ``map_gain`` scales the map net's output: with gain 0.4 and tau = 1
        roughly 0.7% of map entries fire, a moderate shower.
        """
        if dictionary is None:
            dictionary = streak_init_dictionary(p, M, seed)
        if per_atom_theta != dictionary.per_atom_theta:
            dictionary = KernelDictionary(dictionary.coeffs, per_atom_theta=per_atom_theta)
        if map_weights is None:
            map_weights = init_rot_resnet(K, K, hidden, blocks, seed=seed, out_gain=map_gain)
        stages = cascade_stage_weights(dictionary, map_weights.in_channels, cascade_depth, seed)
        return cls(dictionary, map_weights, stages)

    @property
    def K(self) -> int:
        return self.map_weights.in_channels

    @property
    def M(self) -> int:
        return self.dictionary.M

    @property
    def cascade_depth(self) -> int:
        return len(self.stage_weights) + 1

    def kernels(self, factors):
        return build_cascade(self.dictionary, factors.alpha, factors, self.stage_weights)

    def rain_map(self, Z, factors) -> np.ndarray:
        return generate_rain_map(Z, np.radians(factors.theta_scalar_deg), factors.tau, self.map_weights)

    def rain_layer(self, Z, factors):
        """Return ``(rain_map, rain_layer)`` for one factor draw."""
        rain_map = self.rain_map(Z, factors)
        return rain_map, compose_rain_layer(rain_map, self.kernels(factors))
