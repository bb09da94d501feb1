"""Simulation and verification tools for one-dimensional diffusions in dynamical Wiener environments."""

from .env import EnvironmentPath, affine_approx, analytic_path, sample_path
from .integrate import EnsembleConfig, run_ensemble
from .transform import PotentialSpec, PseudoScale

__all__ = [
    "EnvironmentPath",
    "EnsembleConfig",
    "PotentialSpec",
    "PseudoScale",
    "affine_approx",
    "analytic_path",
    "run_ensemble",
    "sample_path",
]
__version__ = "0.1.0"
