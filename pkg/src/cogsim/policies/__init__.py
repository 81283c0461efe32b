"""Treatment policies, evaluation harness, significance tests, attribution."""

from .base import ConstantPolicy, HeuristicPolicy, NoMedicationPolicy, Policy, repair_action
from .cem import CemConfig, CemResult, LinearScorePolicy, cem_train
from .evaluate import EvalReport, evaluate
from .shapley import shapley_attribution
from .wilcoxon import wilcoxon_signed_rank

__all__ = [
    "CemConfig",
    "CemResult",
    "ConstantPolicy",
    "EvalReport",
    "HeuristicPolicy",
    "LinearScorePolicy",
    "NoMedicationPolicy",
    "Policy",
    "cem_train",
    "evaluate",
    "repair_action",
    "shapley_attribution",
    "wilcoxon_signed_rank",
]
