"""Denoising-diffusion stochastic human motion prediction with a graph refiner."""

from .config import TrainConfig, desk_profile, load_config, full_profile
from .data import MotionSequence, Skeleton, WindowPair, synth_kinematic_chain
from .diffusion import forward_diffuse, reverse_step, sample, simplified_loss
from .networks import DiffusionModel, NetworkConfig, build_model
from .refine import GCNRefiner, RefineConfig, build_refiner, refine_loss
from .schedule import NoiseSchedule, build_linear_schedule

__version__ = "0.1.0"

__all__ = [
    "TrainConfig", "desk_profile", "load_config", "full_profile",
    "MotionSequence", "Skeleton", "WindowPair", "synth_kinematic_chain",
    "forward_diffuse", "reverse_step", "sample", "simplified_loss",
    "DiffusionModel", "NetworkConfig", "build_model",
    "GCNRefiner", "RefineConfig", "build_refiner", "refine_loss",
    "NoiseSchedule", "build_linear_schedule",
]
