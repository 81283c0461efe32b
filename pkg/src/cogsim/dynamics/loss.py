"""Composite training objective for the forecaster.

Squared error on continuous targets, binary cross-entropy from logits on
binary targets, and a small auxiliary term that discourages routing collapse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..schema import FeatureSchema
from .moe import RouterStats

LOAD_BALANCE_WEIGHT = 0.005


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    bce: float
    load_balance: float

    @property
    def total(self) -> float:
        return self.mse + self.bce + LOAD_BALANCE_WEIGHT * self.load_balance


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Elementwise stable binary cross-entropy from logits."""
    # softplus(-z) + (1-y) * z, written to avoid overflow for large |z|
    return np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))


def composite_loss(
    pred: np.ndarray,
    target: np.ndarray,
    router_stats: RouterStats,
    schema: FeatureSchema,
) -> LossBreakdown:
    """Mean losses over aligned (n, n_features) prediction/target matrices.

    Continuous columns of *pred* hold values, binary columns hold logits;
    binary columns of *target* must be 0/1.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    if pred.shape[1] != schema.n_features:
        raise ValueError("prediction width does not match schema")

    cont = schema.continuous_mask
    binary = schema.binary_mask
    mse = float(np.mean((pred[:, cont] - target[:, cont]) ** 2)) if cont.any() else 0.0
    if binary.any():
        labels = target[:, binary]
        if not np.all(np.isin(labels, (0.0, 1.0))):
            raise ValueError("binary targets must be 0/1")
        bce = float(np.mean(bce_with_logits(pred[:, binary], labels)))
    else:
        bce = 0.0
    return LossBreakdown(mse=mse, bce=bce, load_balance=router_stats.load_balance())
