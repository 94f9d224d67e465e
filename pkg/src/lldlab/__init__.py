"""Tool-integrated GRPO with likelihood-preserving penalties, on a linear-softmax policy."""
from .core import RolloutGroup, Segment, Trajectory, Vocab, validate_trajectory
from .diagnostics import StepMetrics, gwhes_score, phase_tag, probe_delta_x
from .env import Corpus, Task, generate_corpus, generate_tasks, reward, run_episode
from .grpo import GrpoConfig, compute_advantages, grpo_surrogate
from .lldreg import RegConfig, penalty, total_loss
from .policy import FeatureMap, PolicyParams, log_prob
from .trainer import TrainConfig, build_lab, collect_group, train_loop, train_step

__version__ = "0.1.0"

__all__ = [
    "RolloutGroup", "Segment", "Trajectory", "Vocab", "validate_trajectory",
    "StepMetrics", "gwhes_score", "phase_tag", "probe_delta_x",
    "Corpus", "Task", "generate_corpus", "generate_tasks", "reward", "run_episode",
    "GrpoConfig", "compute_advantages", "grpo_surrogate",
    "RegConfig", "penalty", "total_loss",
    "FeatureMap", "PolicyParams", "log_prob",
    "TrainConfig", "build_lab", "collect_group", "train_loop", "train_step",
]
