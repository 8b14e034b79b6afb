"""Residual multi-task grasping on a deterministic planar environment:
geometry-unaware base experts, a mixture-of-experts hyper-policy with
residual actions, two-stage reward training, and point-cloud distillation.
"""

from .env import EnvConfig, GraspProposal, PlanarVecEnv
from .harness import ExperimentConfig, evaluate, run_pipeline
from .policies import (BasePolicy, HyperPolicy, MoeTeacher, ObservationMask,
                       VisionPolicy, combine_actions)
from .ppo import PpoConfig
from .rewards import RewardConfig

__all__ = [
    "EnvConfig", "GraspProposal", "PlanarVecEnv", "ExperimentConfig",
    "evaluate", "run_pipeline", "BasePolicy", "HyperPolicy", "MoeTeacher",
    "ObservationMask", "VisionPolicy", "combine_actions", "PpoConfig",
    "RewardConfig",
]
