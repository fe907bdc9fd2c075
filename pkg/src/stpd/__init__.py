"""Dynamic PET reconstruction toolkit.

Physics forward model, Poisson scan simulation, MLEM and spatial-temporal
kernel-EM baselines, and an unrolled spatial-temporal primal-dual network
trained with a built-in reverse-mode differentiation engine.
"""

from .metrics import evaluate, psnr, ssim
from .network import NetworkConfig, init_network, load_params, reconstruct, save_params
from .projector import ProjectorGeometry, back_project, build_geometry, forward_project
from .recon import KernelOperator, build_st_kernel, kem_st, mlem
from .simulate import (FrameSchedule, PhantomSpec, ScanModel,
                       default_phantom_spec, make_phantom, normalize_pair,
                       simulate_scan)
from .tensorio import read_tensor, write_tensor
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ProjectorGeometry", "build_geometry", "forward_project", "back_project",
    "FrameSchedule", "PhantomSpec", "ScanModel", "default_phantom_spec",
    "make_phantom", "simulate_scan", "normalize_pair",
    "KernelOperator", "build_st_kernel", "mlem", "kem_st",
    "NetworkConfig", "init_network", "reconstruct", "save_params", "load_params",
    "TrainConfig", "train",
    "evaluate", "psnr", "ssim",
    "read_tensor", "write_tensor",
]
