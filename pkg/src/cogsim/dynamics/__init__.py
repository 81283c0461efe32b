"""Forecasting engines: full transformer, trainable surrogate, linear reference."""

from .gradcheck import gradient_check
from .interface import (
    DynamicsModel,
    LinearGaussianDynamics,
    MoEDynamics,
    autoregressive_rollout,
)
from .loss import LOAD_BALANCE_WEIGHT, LossBreakdown, bce_with_logits, composite_loss
from .mini import (
    MiniConfig,
    MiniDynamics,
    MiniWeights,
    TrainingDiverged,
    build_context,
    build_pairs,
    evaluate_loss,
    init_mini,
    loss_and_grad,
    loss_only,
    predict_top1,
    train_mini,
)
from .moe import (
    DynamicsError,
    MoEConfig,
    RouterStats,
    WeightsBundle,
    init_weights,
    layer_norm,
    moe_forward,
    softmax,
)

__all__ = [
    "DynamicsModel",
    "DynamicsError",
    "LinearGaussianDynamics",
    "LossBreakdown",
    "LOAD_BALANCE_WEIGHT",
    "MiniConfig",
    "MiniDynamics",
    "MiniWeights",
    "MoEConfig",
    "MoEDynamics",
    "RouterStats",
    "TrainingDiverged",
    "WeightsBundle",
    "autoregressive_rollout",
    "bce_with_logits",
    "build_context",
    "build_pairs",
    "composite_loss",
    "evaluate_loss",
    "gradient_check",
    "init_mini",
    "init_weights",
    "layer_norm",
    "loss_and_grad",
    "loss_only",
    "moe_forward",
    "predict_top1",
    "softmax",
    "train_mini",
]
