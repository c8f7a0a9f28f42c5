"""3D diffusion policies over end-effector keyposes, from scratch on numpy."""

from .denoiser import Denoiser, DenoiserConfig, DenoiserInputs, Trajectory, denoiser_loss, sample_trajectory
from .diffusion import NoiseSchedule, build_schedule, forward_noise, reverse_step
from .envs import (BimodalReach, Demonstration, OrderedStack, SceneSpec, evaluate_policy,
                   generate_bimodal_reach, generate_ordered_stack)
from .estimator import DiffusionPolicy, RegressionPolicy
from .exceptions import KeyposeDiffusionError
from .keypose import Action, RawTrajectory, extract_keyposes, interpolate_segment

__version__ = "0.1.0"

__all__ = [
    "Action", "BimodalReach", "Demonstration", "Denoiser", "DenoiserConfig", "DenoiserInputs",
    "DiffusionPolicy", "KeyposeDiffusionError", "NoiseSchedule", "OrderedStack", "RawTrajectory",
    "RegressionPolicy", "SceneSpec", "Trajectory", "build_schedule", "denoiser_loss", "evaluate_policy",
    "extract_keyposes", "forward_noise", "generate_bimodal_reach", "generate_ordered_stack",
    "interpolate_segment", "reverse_step", "sample_trajectory",
]
