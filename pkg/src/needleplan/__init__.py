"""Learn per-skill feature densities from needle-steering demonstrations
and synthesize trajectories in new levels by stochastic optimization."""

from .domain import (
    ActionLabel, Control, Demonstration, Gate, Level, Metrics, NeedleState,
    PredicateSet, check_valid, eval_predicates, gate_features, generate_level,
    rollout_primitives, score, step,
)
from .gmm import FitConfig, Gaussian, GmmModel, fit_em, fit_weighted_gaussian, fit_weighted_gmm
from .optimizer import OptimizerConfig, OptResult, PlanResult, TrajectoryParam, optimize, plan_task
from .skills import SkillBundle, SkillChain, SkillModel, build_chain, segment, train_bundle

__version__ = "0.1.0"

__all__ = [
    "ActionLabel", "Control", "Demonstration", "FitConfig", "Gate", "Gaussian",
    "GmmModel", "Level", "Metrics", "NeedleState", "OptResult", "OptimizerConfig",
    "PlanResult", "PredicateSet", "SkillBundle", "SkillChain", "SkillModel",
    "TrajectoryParam", "build_chain", "check_valid", "eval_predicates", "fit_em",
    "fit_weighted_gaussian", "fit_weighted_gmm", "gate_features", "generate_level",
    "optimize", "plan_task", "rollout_primitives", "score", "segment", "step",
    "train_bundle",
]
