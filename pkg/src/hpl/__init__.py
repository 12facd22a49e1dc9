"""Hierarchical preference learning for multi-step agents, on a synthetic
sub-task environment with tabular policies."""

from .curriculum import CurriculumMatrix, CurriculumThresholds, build_matrix, phase_dataset
from .dpo import Datasets, DpoConfig, TrainReport, loss_group, loss_hpl, loss_step, loss_traj, train_hpl
from .envsim import EnvConfig, TabularMDP, TaskSuite, Trajectory, make_suite, scripted_expert
from .errors import CapabilityError, ConfigError, HplError, TransportError, UsageError, ValidationError
from .evaluate import EvalSummary, evaluate
from .pipeline import Pipeline, PipelineConfig
from .policy import PolicyParams, bc_train, freeze_reference
from .prefgen import GroupPair, StepPair, TrajPair, gen_group_pairs, gen_step_pairs, gen_traj_pairs
from .segment import Segmenter, validate_response

__all__ = [
    "CurriculumMatrix",
    "CurriculumThresholds",
    "build_matrix",
    "phase_dataset",
    "Datasets",
    "DpoConfig",
    "TrainReport",
    "loss_group",
    "loss_hpl",
    "loss_step",
    "loss_traj",
    "train_hpl",
    "EnvConfig",
    "TabularMDP",
    "TaskSuite",
    "Trajectory",
    "make_suite",
    "scripted_expert",
    "CapabilityError",
    "ConfigError",
    "HplError",
    "TransportError",
    "UsageError",
    "ValidationError",
    "EvalSummary",
    "evaluate",
    "Pipeline",
    "PipelineConfig",
    "PolicyParams",
    "bc_train",
    "freeze_reference",
    "GroupPair",
    "StepPair",
    "TrajPair",
    "gen_group_pairs",
    "gen_step_pairs",
    "gen_traj_pairs",
    "Segmenter",
    "validate_response",
]

__version__ = "0.1.0"
