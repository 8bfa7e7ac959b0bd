"""Score-guided refinement of parametric body poses with a conditional diffusion prior."""
__version__ = "0.1.0"

from .body_model import BodyModel, JointMap, forward, load_model, make_toy_model, save_model
from .camera import Camera, WeakPerspective, project, weak_to_perspective
from .denoiser import NoisePredictor, checkpoint_load, checkpoint_save
from .diffusion import cosine_schedule, ddim_invert, ddim_sample
from .engine import EngineConfig, RefineResult, refine, refine_multiview, refine_sequence
from .guidance import GuidanceWeights, loss_mv, loss_repr, loss_temp, modified_noise
from .metrics import accel_error, mpjpe, pa_mpjpe
from .synthetic import SyntheticWorld
from .training import TrainConfig, train

__all__ = [
    "BodyModel", "JointMap", "forward", "load_model", "make_toy_model", "save_model",
    "Camera", "WeakPerspective", "project", "weak_to_perspective",
    "NoisePredictor", "checkpoint_load", "checkpoint_save",
    "cosine_schedule", "ddim_invert", "ddim_sample",
    "EngineConfig", "RefineResult", "refine", "refine_multiview", "refine_sequence",
    "GuidanceWeights", "loss_mv", "loss_repr", "loss_temp", "modified_noise",
    "accel_error", "mpjpe", "pa_mpjpe", "SyntheticWorld", "TrainConfig", "train",
]
