"""Uncertainty-gated adaptive replanning on diffusion-sampled state plans.

A small offline pipeline: scripted controllers generate datasets on two toy
control tasks, a denoising diffusion model learns to sample state-trajectory
plans, an ensemble of inverse-dynamics models turns consecutive plan states
into actions with a predictive-uncertainty estimate, and a control loop uses
that uncertainty to decide when a fresh plan is actually needed.
"""

from .bench import (MetricsRow, evaluate, normalized_return, reference_returns,
                    sweep_delta)
from .config import RunConfig, load_run_config
from .dataset import OfflineDataset, generate_dataset, load_dataset, save_dataset
from .diffusion import (DiffusionModel, build_schedule, load_diffusion, sample_plan,
                        save_diffusion, train_diffusion)
from .ensemble import (Ensemble, load_ensemble, predict, save_ensemble,
                       train_ensemble)
from .envs import EnvSpec, make_env_spec, reset, step
from .errors import (AdaplanError, ConfigError, DomainError, FormatError,
                     NumericError, SamplingDivergedError)
from .policy import EpisodeTrace, PolicyConfig, run_episode, saved_nfe_fraction
from .rng import RngStream

__all__ = [
    "AdaplanError", "ConfigError", "DiffusionModel", "DomainError", "Ensemble",
    "EnvSpec", "EpisodeTrace", "FormatError", "MetricsRow", "NumericError",
    "OfflineDataset", "PolicyConfig", "RngStream", "RunConfig",
    "SamplingDivergedError", "build_schedule", "evaluate", "generate_dataset",
    "load_dataset", "load_diffusion", "load_ensemble", "load_run_config",
    "make_env_spec", "normalized_return", "predict", "reference_returns",
    "reset", "run_episode", "sample_plan", "save_dataset", "save_diffusion",
    "save_ensemble", "saved_nfe_fraction", "step", "sweep_delta",
    "train_diffusion", "train_ensemble",
]

__version__ = "0.1.0"
