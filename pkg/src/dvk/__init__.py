"""Deep variational Koopman models: latent linear dynamics inferred from trajectories,
used for uncertainty-aware prediction and ensemble model predictive control."""
from .envs import Trajectory, get_env
from .linsys import LinearModel
from .model import DVK, DvkConfig, load_checkpoint, save_checkpoint, train

__all__ = ["DVK", "DvkConfig", "LinearModel", "Trajectory", "get_env", "load_checkpoint",
           "save_checkpoint", "train"]
