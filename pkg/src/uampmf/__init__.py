"""Bayesian matrix factorization via unitary AMP, applied to blind
near-field localization and signal detection."""

from .jnflsd import JnflsdConfig, JnflsdResult, run_jnflsd
from .mf_engine import EngineConfig, run_uamp_mf
from .nearfield import ArrayGeometry, generate_scene, rayleigh_distance, steering_vector
from .uamp import LinearModel, gaussian_denoiser, uamp_solve, unitary_transform

__all__ = [
    "ArrayGeometry",
    "EngineConfig",
    "JnflsdConfig",
    "JnflsdResult",
    "LinearModel",
    "gaussian_denoiser",
    "generate_scene",
    "rayleigh_distance",
    "run_jnflsd",
    "run_uamp_mf",
    "steering_vector",
    "uamp_solve",
    "unitary_transform",
]

__version__ = "0.1.0"
