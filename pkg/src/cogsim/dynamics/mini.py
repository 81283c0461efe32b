"""Trainable reduced mixture-of-experts forecaster with analytic gradients.

The surrogate summarizes a visit history as the last visit's input vector
concatenated with the running mean of the earlier ones, routes that context
through a softmax gate over linear experts, and is trained with the same
composite objective as the full forecaster (soft mixture during training,
top-1 expert at inference). Every gradient is hand-derived and checked
against finite differences in the test suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..schema import (
    FeatureSchema,
    PatientState,
    ScalerStats,
    Trajectory,
    Visit,
    ZSCALED,
    assemble_model_input,
    zscale,
)
from .. import tensorio
from .loss import LOAD_BALANCE_WEIGHT, LossBreakdown, bce_with_logits
from .moe import softmax

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Total loss became non-finite during training."""


@dataclass(frozen=True)
class MiniConfig:
    n_experts: int = 8
    input_dim: int = 39
    n_targets: int = 21
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    weight_decay: float = 0.01
    lb_weight: float = LOAD_BALANCE_WEIGHT
    # Plateau schedule: halve lr after `patience` validation evaluations
    # without a relative `min_delta` improvement; floor `lr_floor`. The
    # validation loss is evaluated every `eval_every` epochs.
    patience: int = 5
    min_delta: float = 1e-4
    lr_floor: float = 1e-6
    eval_every: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    @property
    def ctx_dim(self) -> int:
        return 2 * self.input_dim

    def to_dict(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "input_dim": self.input_dim,
            "n_targets": self.n_targets,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "weight_decay": self.weight_decay,
            "lb_weight": self.lb_weight,
            "patience": self.patience,
            "min_delta": self.min_delta,
            "lr_floor": self.lr_floor,
        }


@dataclass
class MiniWeights:
    config: MiniConfig
    schema_fingerprint: str
    router_w: np.ndarray  # (E, C)
    router_b: np.ndarray  # (E,)
    expert_w: np.ndarray  # (E, D, C)
    expert_b: np.ndarray  # (E, D)

    def pack(self) -> np.ndarray:
        return np.concatenate(
            [self.router_w.ravel(), self.router_b.ravel(), self.expert_w.ravel(), self.expert_b.ravel()]
        )

    def unpack(self, flat: np.ndarray) -> "MiniWeights":
        e, c, d = self.config.n_experts, self.config.ctx_dim, self.config.n_targets
        sizes = [e * c, e, e * d * c, e * d]
        parts = np.split(np.asarray(flat, dtype=float), np.cumsum(sizes)[:-1])
        return replace(
            self,
            router_w=parts[0].reshape(e, c),
            router_b=parts[1].copy(),
            expert_w=parts[2].reshape(e, d, c),
            expert_b=parts[3].reshape(e, d),
        )

    def save(self, path: str | Path) -> None:
        tensorio.save_tensors(
            path,
            kind="mini-weights",
            meta={"config": self.config.to_dict(), "schema_fingerprint": self.schema_fingerprint},
            tensors={
                "router.w": self.router_w,
                "router.b": self.router_b,
                "experts.w": self.expert_w,
                "experts.b": self.expert_b,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "MiniWeights":
        meta, tensors = tensorio.require_kind(path, "mini-weights")
        return cls(
            config=MiniConfig(**meta["config"]),
            schema_fingerprint=meta["schema_fingerprint"],
            router_w=tensors["router.w"],
            router_b=tensors["router.b"],
            expert_w=tensors["experts.w"],
            expert_b=tensors["experts.b"],
        )


def init_mini(config: MiniConfig, schema_fingerprint: str, seed: int) -> MiniWeights:
    rng = np.random.default_rng(seed)
    c = config
    return MiniWeights(
        config=c,
        schema_fingerprint=schema_fingerprint,
        router_w=rng.normal(0.0, 0.1 / np.sqrt(c.ctx_dim), (c.n_experts, c.ctx_dim)),
        router_b=np.zeros(c.n_experts),
        expert_w=rng.normal(0.0, 1.0 / np.sqrt(c.ctx_dim), (c.n_experts, c.n_targets, c.ctx_dim)),
        expert_b=np.zeros((c.n_experts, c.n_targets)),
    )


def build_context(inputs: np.ndarray) -> np.ndarray:
    """Contexts for positions 0..T-1: [input_t | mean of inputs before t]."""
    t_len, dim = inputs.shape
    prior = np.zeros((t_len, dim))
    if t_len > 1:
        csum = np.cumsum(inputs, axis=0)
        counts = np.arange(1, t_len)[:, None]
        prior[1:] = csum[:-1] / counts
    return np.concatenate([inputs, prior], axis=1)


def build_pairs(
    trajectories: Sequence[Trajectory], stats: ScalerStats, schema: FeatureSchema
) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced (context, next-state) pairs pooled over subjects."""
    xs, ys = [], []
    for traj in trajectories:
        if len(traj) < 2:
            continue
        inputs = np.stack([assemble_model_input(v, stats) for v in traj.visits])
        ctx = build_context(inputs)
        for t in range(len(traj) - 1):
            nxt = traj.visits[t + 1].state
            z = nxt if nxt.space == ZSCALED else zscale(nxt, stats)
            xs.append(ctx[t])
            ys.append(z.values)
    if not xs:
        raise ValueError("no training pairs: every trajectory has fewer than 2 visits")
    return np.array(xs), np.array(ys)


def _forward_soft(w: MiniWeights, x: np.ndarray):
    g = x @ w.router_w.T + w.router_b
    p = softmax(g, axis=1)
    o = np.einsum("nc,edc->ned", x, w.expert_w) + w.expert_b[None, :, :]
    m = np.einsum("ne,ned->nd", p, o)
    return g, p, o, m


def loss_only(
    w: MiniWeights,
    x: np.ndarray,
    y: np.ndarray,
    schema: FeatureSchema,
    lb_weight: float | None = None,
) -> LossBreakdown:
    """Forward-only composite loss (cheap path for finite-difference probes)."""
    del lb_weight  # the breakdown carries the unscaled balance term
    n = x.shape[0]
    cont = schema.continuous_mask
    binary = schema.binary_mask
    _, p, _, m = _forward_soft(w, x)
    mse = float(np.mean((m[:, cont] - y[:, cont]) ** 2)) if cont.any() else 0.0
    bce = (
        float(np.mean(bce_with_logits(m[:, binary], y[:, binary]))) if binary.any() else 0.0
    )
    f = np.bincount(np.argmax(p, axis=1), minlength=w.config.n_experts) / n
    lb = float(w.config.n_experts * np.sum(f * p.mean(axis=0)))
    return LossBreakdown(mse=mse, bce=bce, load_balance=lb)


def loss_and_grad(
    w: MiniWeights,
    x: np.ndarray,
    y: np.ndarray,
    schema: FeatureSchema,
    lb_weight: float | None = None,
) -> tuple[LossBreakdown, MiniWeights]:
    """Composite loss and its analytic gradient (returned in weight layout)."""
    lb_weight = w.config.lb_weight if lb_weight is None else lb_weight
    n = x.shape[0]
    cont = schema.continuous_mask
    binary = schema.binary_mask
    n_cont = int(cont.sum())
    n_bin = int(binary.sum())

    g, p, o, m = _forward_soft(w, x)

    dm = np.zeros_like(m)
    mse = bce = 0.0
    if n_cont:
        resid = m[:, cont] - y[:, cont]
        mse = float(np.mean(resid**2))
        dm[:, cont] = 2.0 * resid / (n * n_cont)
    if n_bin:
        logits = m[:, binary]
        labels = y[:, binary]
        bce = float(np.mean(bce_with_logits(logits, labels)))
        dm[:, binary] = (1.0 / (1.0 + np.exp(-logits)) - labels) / (n * n_bin)

    # Load balance: assignment fractions are piecewise constant, gradient
    # flows through the mean router probabilities only.
    choice = np.argmax(p, axis=1)
    f = np.bincount(choice, minlength=w.config.n_experts) / n
    p_mean = p.mean(axis=0)
    lb = float(w.config.n_experts * np.sum(f * p_mean))

    do = p[:, :, None] * dm[:, None, :]
    dp = np.einsum("ned,nd->ne", o, dm) + lb_weight * w.config.n_experts * f[None, :] / n
    dg = p * (dp - np.sum(dp * p, axis=1, keepdims=True))

    grad = replace(
        w,
        router_w=dg.T @ x,
        router_b=dg.sum(axis=0),
        expert_w=np.einsum("ned,nc->edc", do, x),
        expert_b=do.sum(axis=0),
    )
    return LossBreakdown(mse=mse, bce=bce, load_balance=lb), grad


def predict_top1(w: MiniWeights, ctx: np.ndarray) -> np.ndarray:
    """Inference-time prediction routing each context to its argmax expert."""
    single = ctx.ndim == 1
    x = np.atleast_2d(ctx)
    g = x @ w.router_w.T + w.router_b
    choice = np.argmax(g, axis=1)
    out = np.einsum("nc,ndc->nd", x, w.expert_w[choice]) + w.expert_b[choice]
    return out[0] if single else out


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_total: list[float] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)
    train_bce: list[float] = field(default_factory=list)
    train_lb: list[float] = field(default_factory=list)
    val_total: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def evaluate_loss(
    w: MiniWeights, x: np.ndarray, y: np.ndarray, schema: FeatureSchema
) -> LossBreakdown:
    return loss_only(w, x, y, schema)


def train_mini(
    train_pairs: tuple[np.ndarray, np.ndarray],
    val_pairs: tuple[np.ndarray, np.ndarray],
    schema: FeatureSchema,
    config: MiniConfig | None = None,
    seed: int = 42,
    lb_enabled: bool = True,
) -> tuple[MiniWeights, TrainHistory]:
    """Mini-batch AdamW training with a plateau learning-rate schedule."""
    config = config or MiniConfig()
    x_train, y_train = train_pairs
    x_val, y_val = val_pairs
    if x_train.shape[1] != config.ctx_dim:
        raise ValueError(f"context width {x_train.shape[1]} != {config.ctx_dim}")

    rng = np.random.default_rng(seed)
    w = init_mini(config, schema.fingerprint(), seed)
    lb_weight = config.lb_weight if lb_enabled else 0.0

    theta = w.pack()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    lr = config.lr
    best_val = np.inf
    stall = 0
    history = TrainHistory()

    n = x_train.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses: list[LossBreakdown] = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, grad = loss_and_grad(w.unpack(theta), x_train[idx], y_train[idx], schema, lb_weight)
            if not np.isfinite(loss.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: mse={loss.mse} bce={loss.bce}"
                )
            g = grad.pack()
            step += 1
            m1 = config.adam_beta1 * m1 + (1 - config.adam_beta1) * g
            m2 = config.adam_beta2 * m2 + (1 - config.adam_beta2) * g * g
            mhat = m1 / (1 - config.adam_beta1**step)
            vhat = m2 / (1 - config.adam_beta2**step)
            theta = theta - lr * (mhat / (np.sqrt(vhat) + config.adam_eps) + config.weight_decay * theta)
            epoch_losses.append(loss)

        w = w.unpack(theta)
        val_loss = evaluate_loss(w, x_val, y_val, schema)
        history.epochs.append(epoch)
        history.train_total.append(float(np.mean([l.total for l in epoch_losses])))
        history.train_mse.append(float(np.mean([l.mse for l in epoch_losses])))
        history.train_bce.append(float(np.mean([l.bce for l in epoch_losses])))
        history.train_lb.append(float(np.mean([l.load_balance for l in epoch_losses])))
        history.val_total.append(val_loss.total)
        history.lr.append(lr)

        if (epoch + 1) % config.eval_every == 0:
            # The plateau metric tracks the predictive part only; the
            # auxiliary balance term jumps with hard assignment counts and
            # would trigger spurious halvings.
            metric = val_loss.mse + val_loss.bce
            if metric < best_val * (1.0 - config.min_delta):
                best_val = metric
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    lr = max(lr / 2.0, config.lr_floor)
                    stall = 0
    return w, history


class MiniDynamics:
    """Forecaster interface over trained surrogate weights."""

    def __init__(self, weights: MiniWeights, schema: FeatureSchema):
        if weights.schema_fingerprint != schema.fingerprint():
            raise ValueError("surrogate weights were produced for a different schema")
        self.weights = weights
        self.schema = schema

    def predict_next(
        self,
        history: Sequence[Visit],
        stats: ScalerStats,
        rng: np.random.Generator | None = None,
    ) -> PatientState:
        inputs = np.stack([assemble_model_input(v, stats) for v in history])
        ctx = build_context(inputs)[-1]
        out = predict_top1(self.weights, ctx)
        binary = self.schema.binary_mask
        values = out.copy()
        # Binary heads emit logits; re-enter the input space as hard 0/1.
        values[binary] = (out[binary] > 0.0).astype(float)
        return PatientState(values, space=ZSCALED)
