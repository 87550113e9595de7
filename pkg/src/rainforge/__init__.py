"""Controllable synthetic rain built from rotatable, parameterized kernels.

Rain kernels are mixtures of dictionary atoms expressed in a masked Fourier
basis, so they can be re-sampled at any orientation and length/width scale.
A rotatable ResNet turns Gaussian noise into a sparse rain map, the kernels
stamp streaks onto it, and the resulting rain layer is merged with a clean
background.
"""

from .factors import FactorConfig, FactorDistribution, RainFactorSample, image_rng, sample_factors
from .parametrization import BasisSet, TransformParams, build_matrix, fit_coefficients_ls, reconstruct
from .pipeline import GenerationConfig, Generator, generate_dataset, load_config, render_rainy, sweep_factor
from .rain_kernel import KernelDictionary, build_cascade, build_rain_kernels, streak_init_dictionary
from .recovery import RecoveryProblem, fit_factors, grad_check, recovery_grad, recovery_loss
from .rot_tv import orientation_scan, rot_tv_loss
from .scene import RainContext, compose_rain_layer, generate_rain_map, merge_additive, merge_rotconv, sparsity

__version__ = "0.1.0"

__all__ = [
    "BasisSet",
    "TransformParams",
    "build_matrix",
    "fit_coefficients_ls",
    "reconstruct",
    "KernelDictionary",
    "build_rain_kernels",
    "build_cascade",
    "streak_init_dictionary",
    "FactorConfig",
    "FactorDistribution",
    "RainFactorSample",
    "image_rng",
    "sample_factors",
    "RainContext",
    "generate_rain_map",
    "compose_rain_layer",
    "merge_additive",
    "merge_rotconv",
    "sparsity",
    "rot_tv_loss",
    "orientation_scan",
    "RecoveryProblem",
    "recovery_loss",
    "recovery_grad",
    "grad_check",
    "fit_factors",
    "GenerationConfig",
    "Generator",
    "load_config",
    "render_rainy",
    "generate_dataset",
    "sweep_factor",
]
