"""Variational ARD reconstruction for Poisson transmission tomography."""

from .projector import FanBeamGeometry, ImageGrid, SystemMatrix, build_system_matrix
from .transforms import SparsifyingTransform, build_transform
from .simulate import Sinogram, sample_sinogram, shepp_logan
from .vard import PosteriorState, Problem, VardConfig, run_vard
from .diagnostics import nrmse
from .scenarios import desk_scenario

__all__ = [
    "FanBeamGeometry",
    "ImageGrid",
    "SystemMatrix",
    "build_system_matrix",
    "SparsifyingTransform",
    "build_transform",
    "Sinogram",
    "sample_sinogram",
    "shepp_logan",
    "PosteriorState",
    "Problem",
    "VardConfig",
    "run_vard",
    "nrmse",
    "desk_scenario",
]

__version__ = "0.1.0"
